"""ReFactor GNN: gradient descent on node states recast as message passing.

A layer updates every node state with

    h[v] <- h[v] + alpha * sum of messages over v's 1-hop edges - beta * n[v]

where an outgoing edge (v, r, w) sends grad_{h[v]} Γ(v, r, w), an incoming edge
(w, r, v) sends (1 - P(v | w, r)) grad_{h[v]} Γ(w, r, v), and n[v] collects the
partition-function terms of every triple in scope. With alpha = beta / |T| a
layer is exactly one full-batch gradient step of the factorization model on
the node states.

Only the relation table is learned. Node states live in an external cache
(push / pull / clear) that is reset to the input features every L passes.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import KnowledgeGraph
from .kernels import adagrad_update, scatter_add_rows
from .scoring import FactorizationModel, ModelSpec, ShapeError, get_family

logger = logging.getLogger(__name__)

SUPPORTED_DECODERS = ("distmult", "complex", "rescal")


@dataclass
class RefactorConfig:
    layers: int | None = None  # None: never clear the cache (L = infinity)
    beta: float = 0.1
    alpha: float | None = None  # None: beta / (number of triples in the layer's scope)
    include_n_term: bool = True
    decoder: ModelSpec = field(default_factory=lambda: ModelSpec("distmult", 32))
    feature_source: str = "random"
    feature_scale: float = 0.02
    layer_optimizer: str = "sgd"
    relation_optimizer: str = "adagrad"
    relation_lr: float | None = None  # None: same as beta
    adagrad_eps: float = 1e-10
    batch_size: int | None = None  # None: full batch
    epochs: int = 1
    softmax_mode: str = "full"
    global_negatives: int = 1
    n3_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.layers is not None and self.layers < 1:
            raise ValueError("layers must be >= 1 (or None for infinity)")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.decoder.family not in SUPPORTED_DECODERS:
            raise ValueError(f"ReFactor decoder must be one of {SUPPORTED_DECODERS}")
        for name in ("layer_optimizer", "relation_optimizer"):
            if getattr(self, name) not in ("sgd", "adagrad"):
                raise ValueError(f"{name} must be 'sgd' or 'adagrad'")
        if self.softmax_mode not in ("full", "sampled"):
            raise ValueError(f"unknown softmax_mode {self.softmax_mode!r}")
        if self.feature_source not in ("random", "file"):
            raise ValueError(f"unknown feature_source {self.feature_source!r}")

    @property
    def psi_lr(self) -> float:
        return self.beta if self.relation_lr is None else self.relation_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder"] = asdict(self.decoder)
        return d


class NodeStateCache:
    """Historical node states with push / pull / clear.

    ``accumulator`` holds per-entry AdaGrad sums when layers are induced by
    AdaGrad; it is forgotten together with the states.
    """

    def __init__(self, initial: np.ndarray, layers: int | None = None):
        initial = np.asarray(initial, dtype=np.float64)
        if not np.all(np.isfinite(initial)):
            raise ValueError("initial node states must be finite")
        self.initial = initial.copy()
        self.initial.setflags(write=False)
        self.layers = layers
        self.states = initial.copy()
        self.accumulator = np.zeros_like(self.states)
        self.layer_counter = 0
        self.batches_since_clear = 0
        self.passes_since_clear = 0

    def pull(self, rows=None) -> np.ndarray:
        if rows is None:
            return self.states.copy()
        return self.states[np.asarray(rows)].copy()

    def push(self, rows, new_states: np.ndarray) -> None:
        new_states = np.asarray(new_states, dtype=np.float64)
        if rows is None:
            if new_states.shape != self.states.shape:
                raise ShapeError(f"push of {new_states.shape} into cache {self.states.shape}")
            self.states[...] = new_states
        else:
            rows = np.asarray(rows)
            if new_states.shape != (len(rows), self.states.shape[1]):
                raise ShapeError(f"push of {new_states.shape} for {len(rows)} rows")
            self.states[rows] = new_states
        self.batches_since_clear += 1

    def clear(self) -> None:
        self.states[...] = self.initial
        self.accumulator[...] = 0.0
        self.layer_counter = 0
        self.batches_since_clear = 0
        self.passes_since_clear = 0

    def end_pass(self) -> bool:
        """Record one full pass over the graph; clears after every L passes."""
        self.passes_since_clear += 1
        if self.layers is not None and self.passes_since_clear >= self.layers:
            self.clear()
            return True
        self.layer_counter = self.passes_since_clear if self.layers is None else self.passes_since_clear % self.layers
        return False


# --- the three message-passing functions -----------------------------------------


def _relation_vector(psi: np.ndarray, r: int) -> np.ndarray:
    if not 0 <= r < len(psi):
        raise IndexError(f"unknown relation id {r}")
    return psi[r]


def message(h_v, r: int, h_w, direction: str, p_v_given_wr: float | None = None, psi=None, decoder: str = "distmult"):
    """Message from neighbour w to v along relation ``r``.

    ``psi`` is the relation table; if omitted, ``r`` must already be the
    relation vector g(r). ``p_v_given_wr`` is only used for incoming edges.
    """
    g = _relation_vector(psi, r) if psi is not None else np.asarray(r, dtype=np.float64)
    h_w = np.asarray(h_w, dtype=np.float64)
    fam = get_family(decoder)
    if direction == "outgoing":
        return fam.subj_query(g, h_w)
    if direction == "incoming":
        if p_v_given_wr is None or not 0.0 <= p_v_given_wr <= 1.0:
            raise ValueError("incoming messages need a probability in [0, 1]")
        return (1.0 - p_v_given_wr) * fam.obj_query(h_w, g)
    raise ValueError(f"direction must be 'outgoing' or 'incoming', got {direction!r}")


def aggregate(messages, dim: int | None = None) -> np.ndarray:
    messages = [np.asarray(m, dtype=np.float64) for m in messages]
    if not messages:
        if dim is None:
            raise ValueError("aggregate of no messages needs dim")
        return np.zeros(dim)
    if any(m.shape != messages[0].shape for m in messages):
        raise ShapeError("messages have mixed lengths")
    return np.sum(messages, axis=0)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def normalizer(triples, h, psi, v: int, candidates=None, decoder: str = "distmult") -> np.ndarray:
    """Global term n[v] for the triples in scope, evaluated triple by triple.

    ``candidates`` restricts the softmax support (default: every row of ``h``).
    For an outgoing triple (v, r, w) the expectation over u includes u = v, whose
    score depends on h[v] through both argument slots; that slot's gradient is
    part of n[v] so that a layer reproduces gradient descent exactly.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    h = np.asarray(h, dtype=np.float64)
    if not 0 <= v < len(h):
        raise IndexError(f"entity id {v} out of range")
    fam = get_family(decoder)
    cand = np.arange(len(h)) if candidates is None else np.asarray(candidates)
    out = np.zeros(h.shape[1])
    if len(triples) == 0:
        return out
    for s, r, o in triples:
        g = _relation_vector(psi, int(r))
        q = fam.obj_query(h[s], g)
        prob = _softmax(h[cand] @ q)
        if s == v:
            out += fam.subj_query(g, prob @ h[cand])
        if o != v and v in cand:
            out += prob[np.searchsorted(cand, v)] * q
    return out / len(triples)


# --- vectorised layer --------------------------------------------------------------------


@dataclass
class LayerTerms:
    z: np.ndarray
    n: np.ndarray
    touched: np.ndarray
    loss: float
    psi_grad_rows: np.ndarray
    psi_grad: np.ndarray


def layer_terms(
    triples: np.ndarray,
    h: np.ndarray,
    psi: np.ndarray,
    decoder: str = "distmult",
    candidates: np.ndarray | None = None,
    with_relation_grad: bool = False,
) -> LayerTerms:
    """Aggregated messages z, normalizers n and (optionally) the relation gradient.

    Everything is read from the snapshot ``h``; nothing is written back.
    ``candidates`` must be sorted and contain every subject and object in scope.
    """
    fam = get_family(decoder)
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    s, r, o = t[:, 0], t[:, 1], t[:, 2]
    B = len(t)
    N, K = h.shape
    S, P, O = h[s], psi[r], h[o]
    Q = fam.obj_query(S, P)
    if candidates is None:
        cand, Hc, o_pos = None, h, o
    else:
        cand = np.asarray(candidates, dtype=np.int64)
        Hc, o_pos = h[cand], np.searchsorted(cand, o)
    prob = _softmax(Q @ Hc.T)
    rows = np.arange(B)
    p_o = prob[rows, o_pos]

    z = np.zeros((N, K))
    scatter_add_rows(z, s, fam.subj_query(P, O))
    scatter_add_rows(z, o, (1.0 - p_o)[:, None] * Q)

    n = np.zeros((N, K))
    scatter_add_rows(n, s, fam.subj_query(P, prob @ Hc))
    spread = prob.T @ Q
    if cand is None:
        n += spread
    else:
        scatter_add_rows(n, cand, spread)
    scatter_add_rows(n, o, -p_o[:, None] * Q)
    n /= B

    touched = np.arange(N) if cand is None else np.union1d(cand, np.concatenate([s, o]))
    loss = float(-np.mean(np.log(np.maximum(p_o, np.finfo(float).tiny))))
    psi_rows, psi_grad = r[:0], np.zeros((0, psi.shape[1]))
    if with_relation_grad:
        G = prob
        G[rows, o_pos] -= 1.0
        G /= B
        _, dP, _ = fam.obj_query_vjp(G @ Hc, S, P)
        psi_rows, psi_grad = r, dP
    return LayerTerms(z, n, touched, loss, psi_rows, psi_grad)


def _n3_grad(x):
    return 3.0 * np.sign(x) * x * x


def layer_delta(terms: LayerTerms, num_triples: int, cfg: RefactorConfig, triples=None, h=None) -> np.ndarray:
    """``alpha * z - beta * n`` (plus the optional N3 pull) for every node."""
    alpha = cfg.beta / num_triples if cfg.alpha is None else cfg.alpha
    delta = alpha * terms.z
    if cfg.include_n_term:
        delta -= cfg.beta * terms.n
    if cfg.n3_weight:
        t = np.asarray(triples).reshape(-1, 3)
        reg = np.zeros_like(delta)
        scatter_add_rows(reg, t[:, 0], _n3_grad(h[t[:, 0]]))
        scatter_add_rows(reg, t[:, 2], _n3_grad(h[t[:, 2]]))
        delta -= alpha * cfg.n3_weight * reg
    return delta


def apply_layer(h: np.ndarray, delta: np.ndarray, rows: np.ndarray, cfg: RefactorConfig, accumulator=None) -> np.ndarray:
    """New states for ``rows``; the AdaGrad variant rescales by the running sum."""
    d = delta[rows]
    if cfg.layer_optimizer == "sgd":
        return h[rows] + d
    # AdaGrad on the implied gradient -delta / beta with learning rate beta
    new = np.ascontiguousarray(h[rows])
    acc = np.ascontiguousarray(accumulator[rows])
    adagrad_update(new, -d / cfg.beta, acc, cfg.beta, cfg.adagrad_eps)
    accumulator[rows] = acc
    return new


def refactor_layer(
    triples: np.ndarray,
    h: np.ndarray,
    psi: np.ndarray,
    cfg: RefactorConfig,
    candidates: np.ndarray | None = None,
    accumulator: np.ndarray | None = None,
) -> np.ndarray:
    """One ReFactor layer over the triples in scope; returns the full new state matrix.

    Reads use the input snapshot only. Rows outside the scope's candidate set
    are returned unchanged.
    """
    h = np.asarray(h, dtype=np.float64)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out = h.copy()
    if len(triples) == 0:
        return out
    terms = layer_terms(triples, h, psi, cfg.decoder.family, candidates)
    delta = layer_delta(terms, len(triples), cfg, triples, h)
    if cfg.layer_optimizer == "adagrad" and accumulator is None:
        accumulator = np.zeros_like(h)
    out[terms.touched] = apply_layer(h, delta, terms.touched, cfg, accumulator)
    return out


# --- layer-wise training of relation embeddings ----------------------------------------


def random_features(num_entities: int, dim: int, seed: int, scale: float = 0.02) -> np.ndarray:
    """Frozen random node features drawn from N(0, scale^2)."""
    return np.random.default_rng(seed).normal(0.0, scale, (num_entities, dim))


@dataclass
class RefactorStep:
    step: int
    loss: float
    cleared: bool


class RefactorTrainer:
    """Layer-wise training of the relation table over an external node-state cache.

    Every step computes the relation gradient and the layer update from the same
    cached snapshot, then applies the optimizer to psi and pushes the new states.
    """

    def __init__(self, graph: KnowledgeGraph, features: np.ndarray, cfg: RefactorConfig, psi: np.ndarray | None = None):
        graph.check_no_self_loops()
        if features.shape != (graph.num_entities, cfg.decoder.entity_dim):
            raise ShapeError(f"features {features.shape} vs ({graph.num_entities}, {cfg.decoder.entity_dim})")
        self.graph = graph
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.cache = NodeStateCache(features, cfg.layers)
        rdim = cfg.decoder.relation_dim
        if psi is None:
            psi = self.rng.normal(0.0, cfg.decoder.init_scale, (graph.num_relations, rdim))
        if psi.shape != (graph.num_relations, rdim):
            raise ShapeError(f"psi {psi.shape} vs ({graph.num_relations}, {rdim})")
        self.psi = np.ascontiguousarray(psi, dtype=np.float64)
        self.psi_accumulator = np.zeros_like(self.psi)
        self.step = 0
        self.epoch = 0

    def _candidates(self, batch: np.ndarray) -> np.ndarray | None:
        if self.cfg.softmax_mode == "full":
            return None
        glob = self.rng.integers(0, self.graph.num_entities, size=self.cfg.global_negatives * len(batch))
        return np.unique(np.concatenate([batch[:, 0], batch[:, 2], glob]))

    def train_step(self, batch: np.ndarray) -> float:
        cfg = self.cfg
        h = self.cache.states  # snapshot: nothing below writes to it before the push
        cand = self._candidates(batch)
        terms = layer_terms(batch, h, self.psi, cfg.decoder.family, cand, with_relation_grad=True)
        delta = layer_delta(terms, len(batch), cfg, batch, h)
        new_rows = apply_layer(h, delta, terms.touched, cfg, self.cache.accumulator)

        grad = np.zeros_like(self.psi)
        scatter_add_rows(grad, terms.psi_grad_rows, terms.psi_grad)
        if cfg.n3_weight:
            scatter_add_rows(grad, batch[:, 1], cfg.n3_weight / len(batch) * _n3_grad(self.psi[batch[:, 1]]))
        if cfg.relation_optimizer == "sgd":
            self.psi -= cfg.psi_lr * grad
        else:
            adagrad_update(self.psi, grad, self.psi_accumulator, cfg.psi_lr, cfg.adagrad_eps)
        # push happens after the gradient computation
        self.cache.push(terms.touched, new_rows)
        return terms.loss

    def run_epoch(self, on_step: Callable[[RefactorStep], None] | None = None) -> float:
        t = self.graph.triples
        perm = self.rng.permutation(len(t))
        bs = self.cfg.batch_size or len(t)
        total = 0.0
        for lo in range(0, len(t), bs):
            batch = t[perm[lo : lo + bs]]
            self.step += 1
            loss = self.train_step(batch)
            total += loss * len(batch)
            if on_step is not None:
                on_step(RefactorStep(self.step, loss, False))
        cleared = self.cache.end_pass()
        self.epoch += 1
        if cleared and on_step is not None:
            on_step(RefactorStep(self.step, float("nan"), True))
        return total / max(len(t), 1)

    def train(self, epochs: int | None = None, on_epoch: Callable[[int, float], None] | None = None) -> np.ndarray:
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            loss = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self.epoch, loss)
        return self.psi

    def model(self, states: np.ndarray | None = None) -> FactorizationModel:
        """Decoder view over cached (or given) node states."""
        return decoder_model(self.cfg.decoder, self.cache.states if states is None else states, self.psi)


def train_relations(graph: KnowledgeGraph, features: np.ndarray, cfg: RefactorConfig) -> tuple[np.ndarray, NodeStateCache]:
    trainer = RefactorTrainer(graph, features, cfg)
    trainer.train()
    return trainer.psi, trainer.cache


def decoder_model(spec: ModelSpec, states: np.ndarray, psi: np.ndarray) -> FactorizationModel:
    return FactorizationModel(spec, len(states), len(psi), {"entity": states, "relation": psi})


def inductive_infer(
    psi: np.ndarray,
    graph: KnowledgeGraph,
    features: np.ndarray,
    cfg: RefactorConfig,
    layers: int | None = None,
) -> np.ndarray:
    """Run ``L`` message-passing rounds from ``features`` on an unseen graph with frozen ``psi``."""
    graph.check_no_self_loops()
    L = cfg.layers if layers is None else layers
    if L is None:
        raise ValueError("inductive inference needs a finite number of layers")
    if graph.num_relations != len(psi):
        raise ValueError(f"relation vocabulary mismatch: graph has {graph.num_relations}, psi has {len(psi)}")
    cache = NodeStateCache(features, None)
    rng = np.random.default_rng(cfg.seed)
    t = graph.triples
    bs = cfg.batch_size or max(len(t), 1)
    for _ in range(L):
        perm = rng.permutation(len(t)) if cfg.batch_size else np.arange(len(t))
        for lo in range(0, len(t), bs):
            batch = t[perm[lo : lo + bs]]
            cand = None
            if cfg.softmax_mode == "sampled":
                glob = rng.integers(0, graph.num_entities, size=cfg.global_negatives * len(batch))
                cand = np.unique(np.concatenate([batch[:, 0], batch[:, 2], glob]))
            h = cache.states
            terms = layer_terms(batch, h, psi, cfg.decoder.family, cand)
            delta = layer_delta(terms, len(batch), cfg, batch, h)
            cache.push(terms.touched, apply_layer(h, delta, terms.touched, cfg, cache.accumulator))
    return cache.states.copy()
