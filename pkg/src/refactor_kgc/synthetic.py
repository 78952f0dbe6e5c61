"""Small generated graphs for tests, oracles and smoke runs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .graph import KnowledgeGraph, Vocabulary


def random_triples(num_entities: int, num_relations: int, num_triples: int, rng, self_loops: bool = False) -> np.ndarray:
    """Up to ``num_triples`` distinct uniform triples (fewer if the space is too small)."""
    seen: set[tuple[int, int, int]] = set()
    capacity = num_entities * num_relations * (num_entities if self_loops else num_entities - 1)
    target = min(num_triples, capacity)
    while len(seen) < target:
        s, r, o = int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities))
        if s == o and not self_loops:
            continue
        seen.add((s, r, o))
    return np.array(sorted(seen), dtype=np.int64).reshape(-1, 3)


def make_graph(triples: np.ndarray, num_entities: int, num_relations: int, prefix: str = "e") -> KnowledgeGraph:
    return KnowledgeGraph(
        Vocabulary(f"{prefix}{i}" for i in range(num_entities)),
        Vocabulary(f"r{j}" for j in range(num_relations)),
        triples,
    )


def split_triples(triples: np.ndarray, fractions, rng) -> list[np.ndarray]:
    perm = rng.permutation(len(triples))
    cuts = np.cumsum([int(round(f * len(triples))) for f in fractions[:-1]])
    return [triples[np.sort(p)] for p in np.split(perm, cuts)]


def rule_triples(num_entities: int, num_rules: int, edges_per_relation: int, rng, max_derived: int | None = None):
    """Base edges plus edges implied by ``r_c(x, z) <- r_a(x, y), r_b(y, z)``.

    Rule ``k`` uses relations ``3k`` (a), ``3k + 1`` (b) and ``3k + 2`` (c).
    Returns ``(base, derived)`` triple arrays without self-loops.
    """
    base, derived = set(), set()
    for k in range(num_rules):
        ra, rb, rc = 3 * k, 3 * k + 1, 3 * k + 2
        a = {(int(rng.integers(num_entities)), int(rng.integers(num_entities))) for _ in range(edges_per_relation)}
        b = {(int(rng.integers(num_entities)), int(rng.integers(num_entities))) for _ in range(edges_per_relation)}
        a = {e for e in a if e[0] != e[1]}
        b = {e for e in b if e[0] != e[1]}
        base |= {(x, ra, y) for x, y in a} | {(x, rb, y) for x, y in b}
        by_src: dict[int, list[int]] = {}
        for y, z in b:
            by_src.setdefault(y, []).append(z)
        comp = sorted({(x, rc, z) for x, y in a for z in by_src.get(y, ()) if x != z})
        if max_derived is not None and len(comp) > max_derived:
            comp = [comp[i] for i in np.sort(rng.choice(len(comp), max_derived, replace=False))]
        derived |= set(comp)
    as_array = lambda s: np.array(sorted(s), dtype=np.int64).reshape(-1, 3)
    return as_array(base), as_array(derived - base)


def inductive_benchmark(
    rng,
    num_rules: int = 3,
    train_entities: int = 200,
    ind_entities: int = 120,
    edges_per_relation: int = 150,
    held_out: float = 0.2,
) -> dict[str, dict]:
    """A transductive graph and a disjoint-entity graph sharing the relation schema.

    Valid and test triples are drawn from the rule-implied edges only, so they
    are predictable from paths in the remaining graph. Entity ids are local to
    each graph.
    """
    out = {}
    for name, n in (("train", train_entities), ("ind", ind_entities)):
        epr = max(1, edges_per_relation * n // train_entities)
        base, derived = rule_triples(n, num_rules, epr, rng, max_derived=2 * epr)
        keep, valid, test = split_triples(derived, (1 - 2 * held_out, held_out, held_out), rng)
        train = np.concatenate([base, keep])
        out[name] = {"train": train[np.lexsort(train.T[::-1])], "valid": valid, "test": test, "num_entities": n}
    return out


def write_split_dir(directory: str | os.PathLike, splits: dict, prefix: str, num_relations: int) -> Path:
    """Write ``train.txt``/``valid.txt``/``test.txt`` with names ``<prefix><id>`` and ``r<id>``.

    Every relation appears in train.txt so the relation vocabulary keeps its order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        t = splits[name]
        if name == "train":
            missing = sorted(set(range(num_relations)) - set(t[:, 1].tolist()))
            if missing:
                raise ValueError(f"relations {missing} never occur in the training split")
            t = t[np.argsort(t[:, 1], kind="stable")]
            # first-appearance order fixes relation ids
            firsts = [int(np.flatnonzero(t[:, 1] == r)[0]) for r in range(num_relations)]
            t = np.concatenate([t[firsts], np.delete(t, firsts, axis=0)])
        with open(directory / f"{name}.txt", "w", encoding="utf-8") as fh:
            fh.writelines(f"{prefix}{s}\tr{r}\t{prefix}{o}\n" for s, r, o in t.tolist())
    return directory
