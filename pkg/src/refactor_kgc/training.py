"""Training objectives, optimizers and the mini-batch trainer for factorization models."""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import adagrad_update, scatter_add_rows
from .scoring import FactorizationModel, ModelSpec, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelSpec
    learning_rate: float = 0.1
    batch_size: int | None = 100  # None: full batch
    epochs: int = 10
    reg_weight: float = 0.0
    rp_weight: float = 0.0
    optimizer: str = "adagrad"
    adagrad_eps: float = 1e-10
    forget_interval: int | None = None
    seed: int = 0
    softmax_mode: str = "full"
    in_batch_negatives: int = 128
    global_negatives: int = 1
    # "both": -log P(s|p,o) - log P(o|s,p); "object": object term only (use with reciprocals)
    entity_terms: str = "both"
    rp_over_base_relations: bool = False
    lr_schedule: str = "constant"
    schedule_steps: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.rp_weight < 0:
            raise ValueError("rp_weight must be >= 0")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if (self.batch_size is not None and self.batch_size < 1) or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.forget_interval is not None and self.forget_interval < 1:
            raise ValueError("forget_interval must be >= 1")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.softmax_mode not in ("full", "sampled"):
            raise ValueError(f"unknown softmax_mode {self.softmax_mode!r}")
        if self.softmax_mode == "sampled" and (self.global_negatives < 0 or self.in_batch_negatives < 1):
            raise ValueError("sampled mode needs in_batch_negatives >= 1 and global_negatives >= 0")
        if self.entity_terms not in ("both", "object"):
            raise ValueError(f"unknown entity_terms {self.entity_terms!r}")
        if self.lr_schedule not in ("constant", "polynomial"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_schedule == "polynomial" and self.schedule_steps < 1:
            raise ValueError("polynomial schedule needs schedule_steps >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model)
        return d


@dataclass
class OptimizerState:
    """AdaGrad running sums of squared gradients plus per-table step counters."""

    accumulator: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: FactorizationModel) -> OptimizerState:
        return cls(
            {k: np.zeros_like(v) for k, v in model.params.items()},
            {k: 0 for k in model.params},
        )


# --- objective pieces ------------------------------------------------------------


def log_softmax_over(scores, target: int) -> float:
    """``scores[target] - logsumexp(scores)`` with max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ShapeError("empty candidate vector")
    if not 0 <= target < scores.size:
        raise IndexError(f"target {target} out of range")
    m = scores.max()
    return float(scores[target] - m - np.log(np.sum(np.exp(scores - m))))


def _log_softmax_rows(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    z = e.sum(axis=1, keepdims=True)
    return scores - m - np.log(z), e / z


def _rp_candidates(model: FactorizationModel, p: int, cfg: TrainConfig, num_base: int | None):
    if not cfg.rp_over_base_relations or num_base is None or num_base == model.num_relations:
        return None
    return np.arange(num_base) if p < num_base else np.arange(num_base, model.num_relations)


def triple_loss(
    model: FactorizationModel,
    triple,
    rp_weight: float = 0.0,
    entity_terms: str = "both",
    rp_over_base_relations: bool = False,
    num_base_relations: int | None = None,
) -> float:
    """Negative log-likelihood of one triple under the relation-prediction objective.

    With ``rp_weight == 0`` and both entity terms this is the plain 1vsAll loss.
    """
    s, p, o = (int(x) for x in triple)
    total = log_softmax_over(model.score_objects([s], [p])[0], o)
    if entity_terms == "both":
        total += log_softmax_over(model.score_subjects([p], [o])[0], s)
    if rp_weight:
        rel_scores = model.score_relations([s], [o])[0]
        cand = None
        if rp_over_base_relations and num_base_relations is not None:
            nb = num_base_relations
            cand = np.arange(nb) if p < nb else np.arange(nb, model.num_relations)
        if cand is not None:
            total += rp_weight * log_softmax_over(rel_scores[cand], int(np.searchsorted(cand, p)))
        else:
            total += rp_weight * log_softmax_over(rel_scores, p)
    return -total


def n3_penalty(rows) -> tuple[float, list[np.ndarray]]:
    """Sum of |x|^3 over all entries, and its gradient 3 sign(x) x^2 per input."""
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    value = float(sum(np.sum(np.abs(r) ** 3) for r in rows))
    return value, [3.0 * np.sign(r) * r * r for r in rows]


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """In-place ``param -= lr * grad``; returns ``param``."""
    if param.shape != np.shape(grad):
        raise ShapeError(f"param {param.shape} vs grad {np.shape(grad)}")
    param -= lr * grad
    return param


def adagrad_step(param: np.ndarray, grad: np.ndarray, lr: float, accumulator: np.ndarray, eps: float = 1e-10):
    """In-place AdaGrad: ``s += g**2``, ``param -= lr * g / sqrt(s + eps)``."""
    if param.shape != np.shape(grad) or param.shape != accumulator.shape:
        raise ShapeError(f"shape mismatch: param {param.shape}, grad {np.shape(grad)}, state {accumulator.shape}")
    adagrad_update(param, grad, accumulator, lr, eps)
    return param, accumulator


# --- batched objective -------------------------------------------------------------


def _sample_candidates(batch: np.ndarray, num_entities: int, cfg: TrainConfig, rng) -> np.ndarray:
    in_batch = np.concatenate([batch[:, 0], batch[:, 2]])
    glob = rng.integers(0, num_entities, size=cfg.global_negatives * len(batch))
    return np.unique(np.concatenate([in_batch, glob]))


def _softmax_term(Q, table, cand, targets, weight, scale):
    """Cross-entropy of targets against ``Q @ table[cand].T``.

    Returns (loss_sum, dQ, dC, cand) where dC are gradients for ``table[cand]``.
    """
    C = table if cand is None else table[cand]
    tpos = targets if cand is None else np.searchsorted(cand, targets)
    scores = Q @ C.T
    logp, prob = _log_softmax_rows(scores)
    rows = np.arange(len(Q))
    loss = -float(np.sum(logp[rows, tpos]))
    G = prob
    G[rows, tpos] -= 1.0
    G *= weight * scale
    return weight * loss, G @ C, G.T @ Q


def _add_table_grad(grads, name, cand, dC):
    if cand is None:
        grads[name] += dC
    else:
        scatter_add_rows(grads[name], cand, dC)


def batch_objective(
    model: FactorizationModel,
    batch: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    num_base_relations: int | None = None,
    candidates: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over ``batch`` and exact gradients for every parameter table.

    This is the edge view in matrix form: each triple pushes its positive-pair
    gradient onto the rows it touches and its partition-function gradient onto
    every candidate row.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    fam, core = model.family, model.core
    ent_sub, rel, ent_obj = model.subject_table, model.params["relation"], model.object_table
    sub_name = "entity"
    obj_name = "entity_obj" if "entity_obj" in model.params else "entity"
    s, p, o = batch[:, 0], batch[:, 1], batch[:, 2]
    S, P, O = ent_sub[s], rel[p], ent_obj[o]
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    dS, dP, dO = np.zeros_like(S), np.zeros_like(P), np.zeros_like(O)
    dcore = np.zeros_like(core) if core is not None else None
    scale = 1.0 / B

    cand = candidates
    if cand is None and cfg.softmax_mode == "sampled":
        if rng is None:
            raise ValueError("sampled softmax needs an rng")
        cand = _sample_candidates(batch, model.num_entities, cfg, rng)

    def add_core(dc):
        if dc is not None:
            dcore[...] += dc

    # object prediction: log P(o | s, p)
    Q = fam.obj_query(S, P, core)
    loss, dQ, dC = _softmax_term(Q, ent_obj, cand, o, 1.0, scale)
    _add_table_grad(grads, obj_name, cand, dC)
    ds, dp, dc = fam.obj_query_vjp(dQ, S, P, core)
    dS += ds
    dP += dp
    add_core(dc)

    # subject prediction: log P(s | p, o)
    if cfg.entity_terms == "both":
        Q = fam.subj_query(P, O, core)
        ls, dQ, dC = _softmax_term(Q, ent_sub, cand, s, 1.0, scale)
        loss += ls
        _add_table_grad(grads, sub_name, cand, dC)
        dp, do, dc = fam.subj_query_vjp(dQ, P, O, core)
        dP += dp
        dO += do
        add_core(dc)

    # relation prediction: lambda * log P(p | s, o)
    if cfg.rp_weight:
        Q = fam.rel_query(S, O, core)
        nb = num_base_relations
        if cfg.rp_over_base_relations and nb is not None and nb < model.num_relations:
            halves = ((p < nb, np.arange(nb)), (p >= nb, np.arange(nb, model.num_relations)))
            for half, rcand in halves:
                if not half.any():
                    continue
                lr_, dQh, dC = _softmax_term(Q[half], rel, rcand, p[half], cfg.rp_weight, scale)
                loss += lr_
                scatter_add_rows(grads["relation"], rcand, dC)
                ds, do, dc = fam.rel_query_vjp(dQh, S[half], O[half], core)
                dS[half] += ds
                dO[half] += do
                add_core(dc)
        else:
            lr_, dQ, dC = _softmax_term(Q, rel, None, p, cfg.rp_weight, scale)
            loss += lr_
            grads["relation"] += dC
            ds, do, dc = fam.rel_query_vjp(dQ, S, O, core)
            dS += ds
            dO += do
            add_core(dc)

    loss *= scale

    if cfg.reg_weight:
        value, (gS, gP, gO) = n3_penalty([S, P, O])
        loss += cfg.reg_weight * value * scale
        w = cfg.reg_weight * scale
        dS += w * gS
        dP += w * gP
        dO += w * gO

    scatter_add_rows(grads[sub_name], s, dS)
    scatter_add_rows(grads["relation"], p, dP)
    scatter_add_rows(grads[obj_name], o, dO)
    if dcore is not None:
        grads["core"] += dcore
    return loss, grads


def full_objective_value(model: FactorizationModel, triples: np.ndarray, cfg: TrainConfig, num_base_relations=None) -> float:
    """Reference objective: mean of :func:`triple_loss` plus batch N3, no vectorised gradients."""
    triples = np.asarray(triples).reshape(-1, 3)
    total = sum(
        triple_loss(model, t, cfg.rp_weight, cfg.entity_terms, cfg.rp_over_base_relations, num_base_relations)
        for t in triples
    )
    if cfg.reg_weight:
        S = model.subject_table[triples[:, 0]]
        P = model.params["relation"][triples[:, 1]]
        O = model.object_table[triples[:, 2]]
        total += cfg.reg_weight * n3_penalty([S, P, O])[0]
    return total / len(triples)


# --- optimisation --------------------------------------------------------------------


def _lr_for(cfg: TrainConfig, n: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * max(0.0, 1.0 - min(n, cfg.schedule_steps) / cfg.schedule_steps)


def apply_gradients(model: FactorizationModel, grads: dict, cfg: TrainConfig, state: OptimizerState) -> None:
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            for g in grads.values():
                g *= cfg.clip_norm / norm
    for name, g in grads.items():
        lr = _lr_for(cfg, state.step_count.get(name, 0))
        if cfg.optimizer == "sgd":
            sgd_step(model.params[name], g, lr)
        else:
            adagrad_step(model.params[name], g, lr, state.accumulator[name], cfg.adagrad_eps)
        state.step_count[name] = state.step_count.get(name, 0) + 1


def fm_train_step(
    model: FactorizationModel,
    batch: np.ndarray,
    cfg: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator | None = None,
    num_base_relations: int | None = None,
) -> float:
    """One optimizer step on ``batch``; updates ``model`` and ``state`` in place, returns the batch loss."""
    loss, grads = batch_objective(model, batch, cfg, rng, num_base_relations)
    apply_gradients(model, grads, cfg, state)
    return loss


def maybe_forget(
    model: FactorizationModel,
    state: OptimizerState,
    step: int,
    forget_interval: int | None,
    rng: np.random.Generator,
) -> bool:
    """Redraw entity tables and zero their optimizer state when ``step % K == 0``.

    Relation tables and the TuckER core are left alone.
    """
    if not forget_interval:
        return False
    if forget_interval < 1:
        raise ValueError("forget_interval must be >= 1")
    if step <= 0 or step % forget_interval:
        return False
    for name in model.entity_table_names:
        model.params[name] = model.draw_entity_table(rng)
        if name in state.accumulator:
            state.accumulator[name] = np.zeros_like(model.params[name])
        state.step_count[name] = step % forget_interval
    return True


@dataclass
class StepRecord:
    step: int
    loss: float
    did_forget: bool


class FMTrainer:
    """Epoch loop over shuffled mini-batches with optional active forgetting.

    ``step`` counts optimizer updates from 1. A forgetting event scheduled for
    step n happens before that step's gradient is computed, so the logged loss
    at step n is measured on the freshly drawn embeddings.
    """

    def __init__(
        self,
        model: FactorizationModel,
        cfg: TrainConfig,
        train_triples: np.ndarray,
        num_base_relations: int | None = None,
        rng: np.random.Generator | None = None,
        state: OptimizerState | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.triples = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
        self.num_base_relations = num_base_relations
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.state = state if state is not None else OptimizerState.for_model(model)
        self.step = 0
        self.epoch = 0

    def run_epoch(self, on_step: Callable[[StepRecord], None] | None = None) -> float:
        perm = self.rng.permutation(len(self.triples))
        bs = self.cfg.batch_size or max(1, len(perm))
        total, n = 0.0, 0
        for lo in range(0, len(perm), bs):
            batch = self.triples[perm[lo : lo + bs]]
            self.step += 1
            forgot = maybe_forget(self.model, self.state, self.step, self.cfg.forget_interval, self.rng)
            loss = fm_train_step(self.model, batch, self.cfg, self.state, self.rng, self.num_base_relations)
            total += loss * len(batch)
            n += len(batch)
            if on_step is not None:
                on_step(StepRecord(self.step, loss, forgot))
        self.epoch += 1
        return total / max(n, 1)
