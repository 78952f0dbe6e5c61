import numpy as np
import pytest

from refactor_kgc.graph import GraphError, add_reciprocals
from refactor_kgc.oracles import equivalence_gap, random_small_graph
from refactor_kgc.refactor import (
    NodeStateCache,
    RefactorConfig,
    RefactorTrainer,
    aggregate,
    inductive_infer,
    layer_terms,
    message,
    normalizer,
    random_features,
    refactor_layer,
)
from refactor_kgc.scoring import FactorizationModel, ModelSpec
from refactor_kgc.synthetic import make_graph, random_triples
from refactor_kgc.training import OptimizerState, TrainConfig, fm_train_step

TOY = np.array([[1, 0, 0], [2, 1, 0], [0, 2, 3]])  # (v2,r1,v1), (v3,r2,v1), (v1,r3,v4)


def test_message_examples():
    assert np.allclose(message(None, [2.0, 0.5], [1.0, 2.0], "outgoing"), [2.0, 1.0])
    assert np.allclose(message(None, [2.0, 0.5], [1.0, 2.0], "incoming", 0.25), [1.5, 0.75])
    assert not message(None, [2.0, 0.5], [1.0, 2.0], "incoming", 1.0).any()
    psi = np.array([[2.0, 0.5]])
    assert np.allclose(message(None, 0, [1.0, 2.0], "outgoing", psi=psi), [2.0, 1.0])
    with pytest.raises(IndexError):
        message(None, 3, [1.0, 2.0], "outgoing", psi=psi)
    with pytest.raises(ValueError):
        message(None, 0, [1.0, 2.0], "incoming", 1.5, psi=psi)


def test_messages_asymmetric(rng):
    g, h_w = rng.normal(size=(2, 6))
    out = message(None, g, h_w, "outgoing", decoder="complex")
    inc = message(None, g, h_w, "incoming", 0.0, decoder="complex")
    assert not np.allclose(out, inc)
    assert not np.allclose(message(None, g, h_w, "outgoing"), message(None, g, h_w, "incoming", 0.3))


def test_aggregate_examples(rng):
    assert np.array_equal(aggregate([], dim=3), np.zeros(3))
    assert np.array_equal(aggregate([[1, 0], [0, 1]]), [1, 1])
    ms = list(rng.integers(-5, 5, size=(6, 4)).astype(float))
    assert np.array_equal(aggregate(ms), aggregate(ms[::-1]))
    with pytest.raises(ValueError):
        aggregate([[1, 0], [1, 0, 0]])


def _log_partition_grad(triples, h, psi, h_step=1e-6):
    """Numerical gradient of the mean object-side log-partition wrt every node state."""

    def f():
        total = 0.0
        for s, r, _ in triples:
            sc = h @ (h[s] * psi[r])
            m = sc.max()
            total += m + np.log(np.exp(sc - m).sum())
        return total / len(triples)

    g = np.zeros_like(h)
    for i in np.ndindex(h.shape):
        old = h[i]
        h[i] = old + h_step
        fp = f()
        h[i] = old - h_step
        fm = f()
        h[i] = old
        g[i] = (fp - fm) / (2 * h_step)
    return g


def test_normalizer_zero_cases(rng):
    h, psi = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    assert not normalizer(np.zeros((0, 3)), h, psi, 1).any()
    with pytest.raises(IndexError):
        normalizer(np.array([[0, 0, 1]]), h, psi, 5)


def test_normalizer_two_entity_hand_expansion(rng):
    h, psi = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
    t = np.array([[0, 0, 1]])
    g = psi[0]
    sc = h @ (h[0] * g)
    p = np.exp(sc) / np.exp(sc).sum()
    # subject: expectation over candidates plus its own slot as a candidate
    n0 = g * (p[0] * h[0] + p[1] * h[1]) + p[0] * h[0] * g
    assert np.allclose(normalizer(t, h, psi, 0), n0, atol=1e-15)
    # the object's partition push is folded into its incoming (1 - P) message
    assert not normalizer(t, h, psi, 1).any()


def test_normalizer_is_partition_gradient(rng):
    t = np.array([[0, 0, 1], [1, 1, 2], [2, 0, 3], [3, 1, 0], [0, 1, 2]])
    h, psi = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    ref = _log_partition_grad(t, h, psi)
    # the P(v | s, r) push on a triple's own object travels with the incoming message instead
    for s, r, o in t:
        q = h[s] * psi[r]
        sc = h @ q
        ref[o] -= np.exp(sc[o] - sc.max()) / np.exp(sc - sc.max()).sum() * q / len(t)
    for v in range(4):
        assert np.abs(normalizer(t, h, psi, v) - ref[v]).max() < 1e-9
    assert np.abs(layer_terms(t, h, psi).n - ref).max() < 1e-9


def test_identity_when_weights_zero(rng):
    h, psi = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    cfg = RefactorConfig(beta=0.0, alpha=1e-300, decoder=ModelSpec("distmult", 3))
    out = refactor_layer(TOY, h, psi, cfg)
    assert np.abs(out - h).max() < 1e-290


@pytest.mark.parametrize("family", ["distmult", "complex", "rescal"])
def test_toy_graph_equivalence(family, rng):
    assert equivalence_gap(TOY, 4, 3, family, 0.5, rng) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_random_graph_equivalence(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        t, n_ent, n_rel = random_small_graph(rng)
        assert equivalence_gap(t, n_ent, n_rel, "distmult", 0.2, rng) < 1e-8


def test_perturbed_gradient_breaks_equivalence(rng):
    assert equivalence_gap(TOY, 4, 3, "distmult", 0.5, rng, perturb=1e-6) > 1e-8


def test_adagrad_layer_matches_adagrad_step(rng):
    spec = ModelSpec("distmult", 4, init_scale=0.5)
    m = FactorizationModel.initialize(spec, 4, 3, rng)
    h0, psi = m.params["entity"].copy(), m.params["relation"].copy()
    cfg = TrainConfig(spec, learning_rate=0.3, optimizer="adagrad", entity_terms="object", batch_size=3)
    fm_train_step(m, TOY, cfg, OptimizerState.for_model(m))
    acc = np.zeros_like(h0)
    h1 = refactor_layer(TOY, h0, psi, RefactorConfig(beta=0.3, layer_optimizer="adagrad", decoder=spec), accumulator=acc)
    assert np.abs(h1 - m.params["entity"]).max() < 1e-12


def test_n3_layer_matches_regularised_step(rng):
    spec = ModelSpec("distmult", 4, init_scale=0.5)
    m = FactorizationModel.initialize(spec, 4, 3, rng)
    h0, psi = m.params["entity"].copy(), m.params["relation"].copy()
    cfg = TrainConfig(spec, learning_rate=0.3, optimizer="sgd", entity_terms="object", reg_weight=0.2, batch_size=3)
    fm_train_step(m, TOY, cfg, OptimizerState.for_model(m))
    h1 = refactor_layer(TOY, h0, psi, RefactorConfig(beta=0.3, n3_weight=0.2, decoder=spec))
    assert np.abs(h1 - m.params["entity"]).max() < 1e-12


def test_dropping_n_term_difference(rng):
    h, psi = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
    spec = ModelSpec("distmult", 3)
    with_n = refactor_layer(TOY, h, psi, RefactorConfig(beta=0.4, decoder=spec))
    without = refactor_layer(TOY, h, psi, RefactorConfig(beta=0.4, include_n_term=False, decoder=spec))
    n = np.stack([normalizer(TOY, h, psi, v) for v in range(4)])
    assert np.abs((without - with_n) - 0.4 * n).max() < 1e-14


def test_layer_permutation_invariant(rng):
    t = random_triples(7, 3, 14, rng)
    h, psi = rng.normal(size=(7, 4)), rng.normal(size=(3, 4))
    cfg = RefactorConfig(beta=0.3, decoder=ModelSpec("distmult", 4))
    a = refactor_layer(t, h, psi, cfg)
    b = refactor_layer(t[rng.permutation(len(t))], h, psi, cfg)
    assert np.abs(a - b).max() < 1e-14


def test_locality_without_n_term(rng):
    # chain 0 -> 1 -> 2 -> 3 -> 4; node 0 only has an outgoing edge
    t = np.array([[0, 0, 1], [1, 0, 2], [2, 0, 3], [3, 0, 4]])
    h, psi = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
    cfg = RefactorConfig(beta=0.3, include_n_term=False, decoder=ModelSpec("distmult", 3))
    far = h.copy()
    far[3] += 1.0
    assert np.array_equal(refactor_layer(t, h, psi, cfg)[0], refactor_layer(t, far, psi, cfg)[0])
    # an incoming message is weighted by 1 - P(v | w, r), which is normalised over every node
    assert not np.array_equal(refactor_layer(t, h, psi, cfg)[1], refactor_layer(t, far, psi, cfg)[1])


def test_isolated_node_moves_only_through_normaliser(rng):
    t = np.array([[0, 0, 1], [1, 0, 2]])
    h, psi = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    spec = ModelSpec("distmult", 3)
    out = refactor_layer(t, h, psi, RefactorConfig(beta=0.3, decoder=spec))
    assert np.allclose(out[3] - h[3], -0.3 * normalizer(t, h, psi, 3), atol=1e-15)
    off = refactor_layer(t, h, psi, RefactorConfig(beta=0.3, include_n_term=False, decoder=spec))
    assert np.array_equal(off[3], h[3])


def test_cache_contract(rng):
    x = rng.normal(size=(5, 3))
    c = NodeStateCache(x, layers=2)
    c.push([1, 3], np.ones((2, 3)))
    assert np.array_equal(c.pull([1, 3]), np.ones((2, 3)))
    c.clear()
    assert np.array_equal(c.pull(), x) and c.batches_since_clear == 0
    c.clear()
    assert np.array_equal(c.pull(), x)
    with pytest.raises(ValueError):
        c.push([0], np.ones((2, 3)))
    assert c.end_pass() is False and c.layer_counter == 1
    c.push(None, np.zeros((5, 3)))
    assert c.end_pass() is True and np.array_equal(c.states, x) and c.layer_counter == 0
    inf = NodeStateCache(x, layers=None)
    assert not any(inf.end_pass() for _ in range(50))


def test_rejects_self_loops(rng):
    g = make_graph(np.array([[0, 0, 0], [0, 0, 1]]), 2, 1)
    with pytest.raises(GraphError):
        RefactorTrainer(g, np.zeros((2, 4)), RefactorConfig(decoder=ModelSpec("distmult", 4)))


def test_layerwise_training_matches_fm_on_umls(umls):
    """With L = inf, full batch and SGD everywhere, cached states follow FM training exactly."""
    g = umls.train
    spec = ModelSpec("distmult", 16, init_scale=0.1)
    rng = np.random.default_rng(3)
    m = FactorizationModel.initialize(spec, g.num_entities, g.num_relations, rng)
    x, psi = m.params["entity"].copy(), m.params["relation"].copy()
    lr = 0.5
    tcfg = TrainConfig(spec, learning_rate=lr, optimizer="sgd", entity_terms="object", batch_size=len(g))
    rcfg = RefactorConfig(beta=lr, decoder=spec, relation_optimizer="sgd")
    trainer = RefactorTrainer(g, x, rcfg, psi=psi.copy())
    state = OptimizerState.for_model(m)
    for _ in range(5):
        fm_train_step(m, g.triples, tcfg, state)
        trainer.train_step(g.triples)
        assert np.abs(trainer.cache.states - m.params["entity"]).max() < 1e-8
        assert np.abs(trainer.psi - m.params["relation"]).max() < 1e-8


def test_relations_survive_clear_and_loss_drops(rng):
    t = random_triples(8, 2, 20, rng)
    g = add_reciprocals(make_graph(t, 8, 2))
    cfg = RefactorConfig(layers=2, beta=0.5, decoder=ModelSpec("distmult", 6, init_scale=0.5), relation_lr=0.5)
    tr = RefactorTrainer(g, random_features(8, 6, 0, 0.5), cfg)
    assert tr.psi.shape == (4, 6)
    first = tr.train_step(g.triples)
    tr.cache.clear()
    for _ in range(49):
        last = tr.train_step(g.triples)
        psi_before = tr.psi.copy()
        tr.cache.clear()
        assert np.array_equal(tr.psi, psi_before)
    assert last < first


def test_epoch_clears_every_l_passes(rng):
    t = random_triples(10, 2, 30, rng)
    g = make_graph(t, 10, 2)
    cfg = RefactorConfig(layers=3, batch_size=7, decoder=ModelSpec("distmult", 4))
    tr = RefactorTrainer(g, random_features(10, 4, 0), cfg)
    cleared = []
    for _ in range(7):
        events = []
        tr.run_epoch(events.append)
        cleared.append(any(e.cleared for e in events))
    assert cleared == [False, False, True, False, False, True, False]


def test_sampled_mode_runs(rng):
    t = random_triples(40, 2, 80, rng)
    g = make_graph(t, 40, 2)
    cfg = RefactorConfig(batch_size=16, softmax_mode="sampled", decoder=ModelSpec("complex", 4))
    tr = RefactorTrainer(g, random_features(40, 4, 1), cfg)
    loss = tr.run_epoch()
    assert np.isfinite(loss) and np.all(np.isfinite(tr.cache.states))


def test_inductive_infer_contract(rng):
    t = random_triples(9, 2, 20, rng)
    g = make_graph(t, 9, 2)
    x = random_features(9, 4, 5)
    psi = rng.normal(size=(2, 4))
    cfg = RefactorConfig(layers=3, beta=0.3, decoder=ModelSpec("distmult", 4))
    assert np.array_equal(inductive_infer(psi, g, x, cfg, layers=0), x)
    a = inductive_infer(psi, g, x, cfg)
    b = inductive_infer(psi, g, x, cfg)
    assert np.array_equal(a, b) and np.all(np.isfinite(a)) and not np.array_equal(a, x)
    # three explicit layers from the same start
    h = x
    for _ in range(3):
        h = refactor_layer(g.triples, h, psi, cfg)
    assert np.abs(a - h).max() < 1e-15
    with pytest.raises(ValueError):
        inductive_infer(rng.normal(size=(3, 4)), g, x, cfg)
    with pytest.raises(ValueError):
        inductive_infer(psi, g, x, RefactorConfig(layers=None, decoder=ModelSpec("distmult", 4)))


def test_config_validation():
    spec = ModelSpec("distmult", 4)
    with pytest.raises(ValueError):
        RefactorConfig(layers=0, decoder=spec)
    with pytest.raises(ValueError):
        RefactorConfig(alpha=-1.0, decoder=spec)
    with pytest.raises(ValueError):
        RefactorConfig(decoder=ModelSpec("tucker", 4))
