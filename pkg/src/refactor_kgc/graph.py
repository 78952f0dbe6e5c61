"""Multi-relational graph loading, integer encoding and indexing."""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RECIPROCAL_SUFFIX = "__reciprocal"


class GraphError(Exception):
    """Base class for data errors raised while building graphs."""


class ParseError(GraphError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class VocabularyError(GraphError):
    pass


class ShapeError(GraphError, ValueError):
    pass


class Vocabulary:
    """Ordered name <-> id mapping; ids are assigned by first appearance."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.names)
            self.names.append(name)
            self.index[name] = idx
        return idx

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self.index

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.names == other.names

    def copy(self) -> Vocabulary:
        return Vocabulary(self.names)


@dataclass
class Adjacency:
    """CSR adjacency: rows of ``pairs[offsets[v]:offsets[v+1]]`` are (relation, neighbour)."""

    offsets: np.ndarray
    pairs: np.ndarray

    def row(self, v: int) -> list[tuple[int, int]]:
        lo, hi = self.offsets[v], self.offsets[v + 1]
        return [(int(r), int(u)) for r, u in self.pairs[lo:hi]]

    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)


def _build_adjacency(num_entities: int, keys: np.ndarray, rel: np.ndarray, other: np.ndarray) -> Adjacency:
    # stable sort keeps insertion order inside each row
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=num_entities)
    offsets = np.zeros(num_entities + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    pairs = np.stack([rel[order], other[order]], axis=1).astype(np.int64)
    return Adjacency(offsets, pairs)


@dataclass
class KnowledgeGraph:
    """Integer-encoded triple set over shared entity/relation vocabularies.

    ``triples`` is an ``(T, 3)`` int64 array of (subject, relation, object).
    ``num_base_relations`` is the relation count before reciprocal augmentation;
    for an augmented graph relation ``r + num_base_relations`` is the inverse of ``r``.
    """

    entities: Vocabulary
    relations: Vocabulary
    triples: np.ndarray
    has_reciprocals: bool = False
    num_base_relations: int | None = None
    duplicates_dropped: int = 0
    _out: Adjacency | None = field(default=None, repr=False)
    _in: Adjacency | None = field(default=None, repr=False)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if self.num_base_relations is None:
            self.num_base_relations = len(self.relations)
        if len(self.triples):
            if self.triples.min() < 0:
                raise GraphError("negative id in triples")
            if max(self.triples[:, 0].max(), self.triples[:, 2].max()) >= len(self.entities):
                raise GraphError("entity id out of range")
            if self.triples[:, 1].max() >= len(self.relations):
                raise GraphError("relation id out of range")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def out_index(self) -> Adjacency:
        if self._out is None:
            t = self.triples
            self._out = _build_adjacency(self.num_entities, t[:, 0], t[:, 1], t[:, 2])
        return self._out

    @property
    def in_index(self) -> Adjacency:
        if self._in is None:
            t = self.triples
            self._in = _build_adjacency(self.num_entities, t[:, 2], t[:, 1], t[:, 0])
        return self._in

    def has_self_loops(self) -> bool:
        return bool(np.any(self.triples[:, 0] == self.triples[:, 2]))

    def check_no_self_loops(self) -> None:
        """Raise if any (v, r, v) triple is present; required by the message-passing path."""
        loops = np.flatnonzero(self.triples[:, 0] == self.triples[:, 2])
        if len(loops):
            s, r, _ = self.triples[loops[0]]
            raise GraphError(
                f"{len(loops)} self-loop triple(s), e.g. "
                f"({self.entities.names[s]}, {self.relations.names[r]}, {self.entities.names[s]})"
            )

    def triple_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(x) for x in t) for t in self.triples}

    def with_triples(self, triples: np.ndarray) -> KnowledgeGraph:
        return KnowledgeGraph(
            self.entities, self.relations, triples, self.has_reciprocals, self.num_base_relations
        )


def _dedupe(triples: np.ndarray) -> tuple[np.ndarray, int]:
    if len(triples) == 0:
        return triples, 0
    _, first = np.unique(triples, axis=0, return_index=True)
    first.sort()
    return triples[first], len(triples) - len(first)


def parse_triples(
    path: str | os.PathLike,
    known_entities: Vocabulary | None = None,
    known_relations: Vocabulary | None = None,
    allow_new_entities: bool = True,
) -> KnowledgeGraph:
    """Read a ``head<TAB>relation<TAB>tail`` file.

    Supplied vocabularies are copied, never mutated. A supplied relation
    vocabulary is fixed: unseen relations raise :class:`VocabularyError`.
    Unseen entities extend a supplied entity vocabulary only when
    ``allow_new_entities`` is true.
    """
    path = Path(path)
    entities = known_entities.copy() if known_entities is not None else Vocabulary()
    relations = known_relations.copy() if known_relations is not None else Vocabulary()
    fixed_entities = known_entities is not None and not allow_new_entities
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            if known_relations is not None and r not in relations:
                raise VocabularyError(f"{path}:{lineno}: unknown relation {r!r}")
            for e in (h, t):
                if fixed_entities and e not in entities:
                    raise VocabularyError(f"{path}:{lineno}: unknown entity {e!r}")
            rows.append((entities.add(h), relations.add(r), entities.add(t)))
    triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
    triples, dropped = _dedupe(triples)
    if dropped:
        logger.warning("%s: dropped %d duplicate triple(s)", path, dropped)
    return KnowledgeGraph(entities, relations, triples, duplicates_dropped=dropped)


def write_triples(g: KnowledgeGraph, path: str | os.PathLike) -> None:
    ent, rel = g.entities.names, g.relations.names
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{ent[s]}\t{rel[r]}\t{ent[o]}\n" for s, r, o in g.triples)


def add_reciprocals(g: KnowledgeGraph) -> KnowledgeGraph:
    """Return a graph with (o, r + |R|, s) added for every (s, r, o)."""
    if g.has_reciprocals or any(n.endswith(RECIPROCAL_SUFFIX) for n in g.relations.names):
        raise GraphError("graph already carries reciprocal relations")
    nr = g.num_relations
    relations = Vocabulary(g.relations.names + [n + RECIPROCAL_SUFFIX for n in g.relations.names])
    inv = g.triples[:, [2, 1, 0]].copy()
    inv[:, 1] += nr
    return KnowledgeGraph(
        g.entities, relations, np.concatenate([g.triples, inv]), has_reciprocals=True, num_base_relations=nr
    )


def neighborhood(g: KnowledgeGraph, v: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Outgoing (relation, object) and incoming (relation, subject) pairs of ``v``."""
    if not 0 <= v < g.num_entities:
        raise IndexError(f"entity id {v} out of range for |E|={g.num_entities}")
    return g.out_index.row(v), g.in_index.row(v)


class FilterIndex:
    """Known-true answers per query, built over a union of triple arrays."""

    def __init__(self, *triple_arrays: np.ndarray):
        self.objects: dict[tuple[int, int], set[int]] = {}
        self.subjects: dict[tuple[int, int], set[int]] = {}
        for arr in triple_arrays:
            for s, r, o in np.asarray(arr).reshape(-1, 3).tolist():
                self.objects.setdefault((s, r), set()).add(o)
                self.subjects.setdefault((r, o), set()).add(s)

    def true_objects(self, s: int, r: int) -> set[int]:
        return self.objects.get((s, r), set())

    def true_subjects(self, r: int, o: int) -> set[int]:
        return self.subjects.get((r, o), set())


def load_features(path: str | os.PathLike, g: KnowledgeGraph) -> np.ndarray:
    """Read a ``rows dim`` header followed by one whitespace-separated row per entity."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError(path, 1, "header must be '<rows> <dim>'")
        rows, dim = int(header[0]), int(header[1])
        if rows != g.num_entities:
            raise ShapeError(f"feature file has {rows} rows, graph has {g.num_entities} entities")
        values = np.loadtxt(fh, dtype=np.float64, ndmin=2) if rows else np.zeros((0, dim))
    if values.shape != (rows, dim):
        raise ShapeError(f"expected {rows}x{dim} values, read {values.shape[0]}x{values.shape[1]}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{path}: non-finite feature value")
    return values


def save_features(path: str | os.PathLike, x: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{x.shape[0]} {x.shape[1]}\n")
        np.savetxt(fh, x, fmt="%.17g")


@dataclass
class Dataset:
    """train/valid/test splits over one vocabulary; ``train`` may be reciprocal-augmented."""

    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph
    base_train: KnowledgeGraph

    @property
    def num_entities(self) -> int:
        return self.train.num_entities

    def split(self, name: str) -> KnowledgeGraph:
        return {"train": self.base_train, "valid": self.valid, "test": self.test}[name]

    def filter_index(self) -> FilterIndex:
        return FilterIndex(self.base_train.triples, self.valid.triples, self.test.triples)


def load_dataset(
    directory: str | os.PathLike,
    reciprocals: bool = True,
    known_relations: Vocabulary | None = None,
    splits: Sequence[str] = ("train", "valid", "test"),
) -> Dataset:
    """Load ``train.txt``, ``valid.txt``, ``test.txt`` with a vocabulary fixed by train.

    Entities first seen in valid/test are appended to the vocabulary so they
    still get (untrained) embeddings; relations must appear in train.
    """
    directory = Path(directory)
    base = parse_triples(directory / f"{splits[0]}.txt", known_relations=known_relations)
    ents, rels = base.entities, base.relations
    others = []
    for name in splits[1:]:
        g = parse_triples(directory / f"{name}.txt", ents, rels, allow_new_entities=True)
        ents = g.entities
        others.append(g)
    # re-bind every split to the final entity vocabulary
    base = KnowledgeGraph(ents, rels, base.triples, duplicates_dropped=base.duplicates_dropped)
    valid = KnowledgeGraph(ents, rels, others[0].triples)
    test = KnowledgeGraph(ents, rels, others[1].triples)
    train = add_reciprocals(base) if reciprocals else base
    return Dataset(train, valid, test, base)


def bundled_dataset_dir(name: str = "umls") -> Path:
    return Path(__file__).parent / "data" / name
