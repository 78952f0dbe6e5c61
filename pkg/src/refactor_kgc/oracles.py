"""Built-in correctness checks run by ``refactor-kgc verify`` and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .evaluation import brute_force_rank_oracle, evaluate
from .graph import FilterIndex
from .refactor import RefactorConfig, layer_terms, normalizer, refactor_layer
from .scoring import FAMILIES, FactorizationModel, ModelSpec
from .synthetic import random_triples
from .training import (
    OptimizerState,
    TrainConfig,
    apply_gradients,
    batch_objective,
    full_objective_value,
)

EQUIVALENCE_TOL = 1e-8
FD_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} {self.detail}  ({self.seconds:.2f}s)"


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def fd_max_relative_error(model: FactorizationModel, triples, cfg: TrainConfig, num_base: int, h: float = 1e-5) -> float:
    """Worst entry-wise relative gap between analytic and central-difference gradients.

    The gap is ``|a - n| / max(|a| + |n|, 1e-6)``, so entries with a vanishing
    gradient are compared in absolute terms.
    """
    _, grads = batch_objective(model, triples, cfg, num_base_relations=num_base)
    worst = 0.0
    for name, P in model.params.items():
        flat, g = P.reshape(-1), grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = full_objective_value(model, triples, cfg, num_base)
            flat[i] = old - h
            fm = full_objective_value(model, triples, cfg, num_base)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(abs(num) + abs(g[i]), 1e-6))
    return worst


def check_gradients(seed: int = 0, families=FAMILIES):
    rng = np.random.default_rng(seed)
    worst = {}
    for fam in families:
        spec = ModelSpec(fam, 4, 3 if fam == "tucker" else None, init_scale=0.5)
        n_ent, n_base = 8, 2
        model = FactorizationModel.initialize(spec, n_ent, 2 * n_base, rng)
        triples = random_triples(n_ent, 2 * n_base, 10, rng)
        cfg = TrainConfig(spec, rp_weight=0.5, reg_weight=0.05)
        worst[fam] = fd_max_relative_error(model, triples, cfg, n_base)
    ok = all(v < FD_TOL for v in worst.values())
    return ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items())


def equivalence_gap(triples, n_ent, n_rel, family, lr, rng, perturb: float = 0.0) -> float:
    """||h_FM - h_ReFactor||_inf after one full-batch SGD step vs one layer."""
    spec = ModelSpec(family, 4, init_scale=0.7)
    model = FactorizationModel.initialize(spec, n_ent, n_rel, rng)
    h0, psi = model.params["entity"].copy(), model.params["relation"].copy()
    cfg = TrainConfig(spec, learning_rate=lr, optimizer="sgd", entity_terms="object", batch_size=len(triples))
    _, grads = batch_objective(model, triples, cfg)
    if perturb:
        grads["entity"] += perturb
    apply_gradients(model, grads, cfg, OptimizerState.for_model(model))
    h1 = refactor_layer(triples, h0, psi, RefactorConfig(beta=lr, alpha=lr / len(triples), decoder=spec))
    return float(np.abs(h1 - model.params["entity"]).max())


def random_small_graph(rng, max_entities=8, max_relations=3, max_triples=15):
    n_ent = int(rng.integers(2, max_entities + 1))
    n_rel = int(rng.integers(1, max_relations + 1))
    t = random_triples(n_ent, n_rel, int(rng.integers(1, max_triples + 1)), rng)
    return t, n_ent, n_rel


def check_equivalence(seed: int = 0, graphs: int = 20, families=("distmult",), perturb: float = 0.0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(graphs):
        t, n_ent, n_rel = random_small_graph(rng)
        for fam in families:
            worst = max(worst, equivalence_gap(t, n_ent, n_rel, fam, 0.3, rng, perturb))
    return worst < EQUIVALENCE_TOL, f"max|dh|={worst:.1e} over {graphs} graphs ({','.join(families)})"


def check_normalizer(seed: int = 0, graphs: int = 10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(graphs):
        t, n_ent, n_rel = random_small_graph(rng)
        h = rng.normal(0, 0.7, (n_ent, 4))
        psi = rng.normal(0, 0.7, (n_rel, 4))
        n = layer_terms(t, h, psi, "distmult").n
        for v in range(n_ent):
            worst = max(worst, float(np.abs(normalizer(t, h, psi, v) - n[v]).max()))
    return worst < 1e-12, f"max gap={worst:.1e}"


def ranking_mismatches(seed: int = 0, queries: int = 1000) -> tuple[int, int]:
    """Compare vectorised and brute-force filtered ranks; returns (mismatches, queries).

    Every other graph uses small-integer embeddings so that ties are frequent
    and all scores are computed exactly on both paths.
    """
    rng = np.random.default_rng(seed)
    done = bad = 0
    k = 0
    while done < queries:
        fam = FAMILIES[k % len(FAMILIES)]
        n_ent, n_base = int(rng.integers(1, 201)), int(rng.integers(1, 4))
        model = FactorizationModel.initialize(ModelSpec(fam, 4), n_ent, 2 * n_base, rng)
        if k % 2:
            for name in model.params:
                model.params[name] = rng.integers(-2, 3, model.params[name].shape).astype(np.float64)
        known = np.stack([rng.integers(0, n_ent, 80), rng.integers(0, n_base, 80), rng.integers(0, n_ent, 80)], 1)
        filters = FilterIndex(known)
        take = known[: min(25, (queries - done + 1) // 2)]
        report = evaluate(model, take, filters, n_base)
        for triple, direction, rank in report.per_query[: queries - done]:
            bad += rank != brute_force_rank_oracle(model, triple, direction, filters, n_base, reciprocal=True)
            done += 1
        k += 1
    return bad, done


def check_ranking(seed: int = 0, queries: int = 1000):
    bad, n = ranking_mismatches(seed, queries)
    return bad == 0, f"{bad} mismatches in {n} queries"


def check_kernels(seed: int = 0):
    """Numba and numpy kernels must agree exactly (skipped when numba is absent)."""
    if kernels.numba is None:
        return True, "numba not installed; numpy path only"
    rng = np.random.default_rng(seed)
    out_a, out_b = np.zeros((20, 5)), np.zeros((20, 5))
    idx = rng.integers(0, 20, 100)
    rows = rng.normal(size=(100, 5))
    kernels.scatter_add_rows_numpy(out_a, idx, rows)
    kernels.scatter_add_rows_numba(out_b, idx, rows)
    scores = rng.integers(-3, 4, (30, 50)).astype(np.float64)
    targets = rng.integers(0, 50, 30)
    sets = [sorted(set(rng.integers(0, 50, 5).tolist()) - {int(t)}) for t in targets]
    ptr = np.concatenate([[0], np.cumsum([len(s) for s in sets])]).astype(np.int64)
    fidx = np.array([e for s in sets for e in s], dtype=np.int64)
    r_a = kernels.filtered_ranks_numpy(scores, targets, ptr, fidx)
    r_b = kernels.filtered_ranks_numba(scores, targets, ptr, fidx)
    p_a, p_b = rng.normal(size=(7, 3)), None
    p_b = p_a.copy()
    s_a, s_b = np.zeros_like(p_a), np.zeros_like(p_a)
    g = rng.normal(size=p_a.shape)
    kernels.adagrad_update_numpy(p_a, g, s_a, 0.1, 1e-10)
    kernels.adagrad_update_numba(p_b, g, s_b, 0.1, 1e-10)
    ok = np.array_equal(r_a, r_b) and np.allclose(out_a, out_b, rtol=0, atol=1e-12) and np.allclose(p_a, p_b, rtol=0, atol=1e-15)
    return ok, f"backend={kernels.BACKEND}"


def run_all(seed: int = 0, perturb: float = 0.0) -> list[CheckResult]:
    return [
        _timed("gradients (finite diff)", check_gradients, seed),
        _timed("layer == gradient step", check_equivalence, seed, 20, ("distmult", "complex", "rescal"), perturb),
        _timed("normalizer reference", check_normalizer, seed),
        _timed("ranking vs brute force", check_ranking, seed),
        _timed("numba == numpy kernels", check_kernels, seed),
    ]
