"""Filtered entity ranking: per-query ranks, MRR and Hits@K."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import FilterIndex, KnowledgeGraph
from .kernels import filtered_ranks
from .scoring import FactorizationModel

HITS_AT = (1, 3, 10)
PROTOCOLS = ("full", "partial-50")


class EvaluationError(Exception):
    pass


def filtered_rank(scores, target: int, filtered=()) -> float:
    """Rank of ``target`` after dropping ``filtered`` candidates; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    filtered = set(int(f) for f in filtered)
    if target in filtered:
        raise EvaluationError("target is in its own filter set")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    idx = np.array(sorted(filtered), dtype=np.int64)
    return float(filtered_ranks(scores[None, :], np.array([target]), np.array([0, len(idx)]), idx)[0])


@dataclass
class RankingReport:
    protocol: str
    per_query: list[tuple[tuple[int, int, int], str, float]] = field(default_factory=list)

    @property
    def ranks(self) -> np.ndarray:
        return np.array([q[2] for q in self.per_query], dtype=np.float64)

    @property
    def mrr(self) -> float:
        return float(np.mean(1.0 / self.ranks)) if self.per_query else 0.0

    @property
    def hits(self) -> dict[int, float]:
        r = self.ranks
        return {k: float(np.mean(r <= k)) if len(r) else 0.0 for k in HITS_AT}

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in self.hits.items()},
            "num_queries": self.num_queries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write_tsv(self, path, graph: KnowledgeGraph) -> None:
        ent, rel = graph.entities.names, graph.relations.names
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(f"{ent[s]}\t{rel[r]}\t{ent[o]}\t{direction}\t{rank!r}\n" for (s, r, o), direction, rank in self.per_query)


def _csr(sets: list[set[int]]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(sets) + 1, dtype=np.int64)
    np.cumsum([len(x) for x in sets], out=ptr[1:])
    idx = np.fromiter((e for x in sets for e in sorted(x)), dtype=np.int64, count=int(ptr[-1]))
    return ptr, idx


def _query_batches(model: FactorizationModel, triples: np.ndarray, filters: FilterIndex, num_base: int, reciprocal: bool):
    """Yield (direction, triples, scores, targets, filter sets) for both query sides."""
    s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
    obj_filter = [filters.true_objects(a, b) - {c} for a, b, c in zip(s.tolist(), r.tolist(), o.tolist())]
    subj_filter = [filters.true_subjects(b, c) - {a} for a, b, c in zip(s.tolist(), r.tolist(), o.tolist())]
    yield "object-side", model.score_objects(s, r), o, obj_filter
    if reciprocal:
        if model.num_relations < 2 * num_base:
            raise EvaluationError("subject-side queries need reciprocal relations in the model")
        subj_scores = model.score_objects(o, r + num_base)
    else:
        subj_scores = model.score_subjects(r, o)
    yield "subject-side", subj_scores, s, subj_filter


def evaluate(
    model: FactorizationModel,
    triples: np.ndarray,
    filters: FilterIndex,
    num_base_relations: int,
    protocol: str = "full",
    rng: np.random.Generator | None = None,
    reciprocal: bool = True,
    batch_size: int = 1000,
    num_negatives: int = 50,
) -> RankingReport:
    """Rank every triple in both directions against all (or 50 sampled) candidates.

    Subject-side queries (?, p, o) are answered as (o, p + |R|, ?) when
    ``reciprocal`` is set, otherwise with the native subject scorer.
    """
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"unknown protocol {protocol!r}")
    if protocol == "partial-50" and rng is None:
        raise EvaluationError("partial ranking needs an rng")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    report = RankingReport(protocol)
    n_ent = model.num_entities
    for lo in range(0, len(triples), batch_size):
        chunk = triples[lo : lo + batch_size]
        results = {}
        for direction, scores, targets, fsets in _query_batches(model, chunk, filters, num_base_relations, reciprocal):
            if protocol == "partial-50":
                fsets = [_partial_filter(n_ent, t, f, num_negatives, rng) for t, f in zip(targets.tolist(), fsets)]
            ptr, idx = _csr(fsets)
            results[direction] = filtered_ranks(scores, targets, ptr, idx)
        for i, t in enumerate(chunk.tolist()):
            for direction in ("object-side", "subject-side"):
                report.per_query.append((tuple(t), direction, float(results[direction][i])))
    return report


def _partial_filter(n_ent: int, target: int, filt: set[int], k: int, rng) -> set[int]:
    """Turn a full-ranking filter into one that leaves only ``k`` sampled negatives."""
    pool = np.setdiff1d(np.arange(n_ent), np.array(sorted(filt | {target}), dtype=np.int64))
    keep = rng.choice(pool, size=min(k, len(pool)), replace=False) if len(pool) else pool
    return set(range(n_ent)) - set(keep.tolist()) - {target}


def brute_force_rank_oracle(
    model: FactorizationModel,
    triple,
    direction: str,
    filters: FilterIndex,
    num_base_relations: int | None = None,
    reciprocal: bool = False,
) -> float:
    """Filtered rank by explicit enumeration, one scalar score call per candidate."""
    if model.num_entities > 200:
        raise ValueError("brute-force oracle is limited to |E| <= 200")
    s, r, o = (int(x) for x in triple)
    if direction == "object-side":
        filt = filters.true_objects(s, r) - {o}
        target = o

        def score(e):
            return model.score_one(s, r, e)

    elif direction == "subject-side":
        filt = filters.true_subjects(r, o) - {s}
        target = s
        if reciprocal:
            inv = r + num_base_relations

            def score(e):
                return model.score_one(o, inv, e)

        else:

            def score(e):
                return model.score_one(e, r, o)

    else:
        raise ValueError(f"unknown direction {direction!r}")
    t = score(target)
    rank = 1.0
    for e in range(model.num_entities):
        if e == target or e in filt:
            continue
        v = score(e)
        if v > t:
            rank += 1.0
        elif v == t:
            rank += 0.5
    return rank
