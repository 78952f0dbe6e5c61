"""Scoring functions for factorization models and their exact gradients.

Every score Γ(s, p, o) is multilinear in its three arguments, so each family
is described by three "query" maps that contract two arguments and leave a
vector to be dotted with the third:

* ``obj_query(s, p)``  with Γ = obj_query(s, p) · o
* ``subj_query(p, o)`` with Γ = s · subj_query(p, o)
* ``rel_query(s, o)``  with Γ = p · rel_query(s, o)

Each query map also has a vector-Jacobian product so a batched loss can be
back-propagated without an autodiff framework. All maps work on batches of
row vectors (leading axis = batch).

ComplEx vectors are stored as ``[real | imag]`` halves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("distmult", "complex", "cp", "rescal", "tucker")


class ShapeError(ValueError):
    pass


def _check_same(*vs):
    n = vs[0].shape[-1]
    if any(v.shape[-1] != n for v in vs):
        raise ShapeError(f"length mismatch: {[v.shape[-1] for v in vs]}")


# --- scalar scorers ------------------------------------------------------------


def score_distmult(s, p, o) -> float:
    s, p, o = (np.asarray(x, dtype=np.float64) for x in (s, p, o))
    _check_same(s, p, o)
    return float(np.sum(s * p * o))


def score_complex(s, p, o) -> float:
    """Re(<s, p, conj(o)>) with ``[real | imag]`` layout."""
    s, p, o = (np.asarray(x, dtype=np.float64) for x in (s, p, o))
    _check_same(s, p, o)
    if s.shape[-1] % 2:
        raise ShapeError("ComplEx vectors need even length")
    d = s.shape[-1] // 2
    sr, si, pr, pi, orr, oi = s[:d], s[d:], p[:d], p[d:], o[:d], o[d:]
    return float(np.sum(pr * sr * orr) + np.sum(pr * si * oi) + np.sum(pi * sr * oi) - np.sum(pi * si * orr))


def score_cp(s_subj, p, o_obj) -> float:
    return score_distmult(s_subj, p, o_obj)


def score_rescal(s, P, o) -> float:
    s, P, o = (np.asarray(x, dtype=np.float64) for x in (s, P, o))
    if P.ndim != 2 or P.shape != (s.shape[0], o.shape[0]):
        raise ShapeError(f"RESCAL needs P of shape ({s.shape[0]}, {o.shape[0]}), got {P.shape}")
    return float(s @ P @ o)


def score_tucker(s, p, o, W) -> float:
    s, p, o, W = (np.asarray(x, dtype=np.float64) for x in (s, p, o, W))
    if W.shape != (s.shape[0], p.shape[0], o.shape[0]):
        raise ShapeError(f"core shape {W.shape} does not match ({s.shape[0]}, {p.shape[0]}, {o.shape[0]})")
    return float(np.einsum("ijk,i,j,k->", W, s, p, o))


# --- families -------------------------------------------------------------------


class Family:
    """Batched query maps for one scoring function. ``core`` is only used by TuckER."""

    name: str
    split_entity_tables = False

    def relation_dim(self, dim: int, relation_dim: int | None) -> int:
        return dim

    def score(self, s, p, o, core=None):
        return np.sum(self.obj_query(s, p, core) * o, axis=-1)

    def grad(self, s, p, o, core=None):
        """(dΓ/ds, dΓ/dp, dΓ/do, dΓ/dcore) for batched or single triples."""
        one = np.ones(np.shape(s)[:-1])
        ds, dp, dcore = self.obj_query_vjp(one[..., None] * o, s, p, core)
        do = self.obj_query(s, p, core)
        return ds, dp, do, dcore


class DistMult(Family):
    name = "distmult"

    def obj_query(self, S, P, core=None):
        return S * P

    def obj_query_vjp(self, G, S, P, core=None):
        return G * P, G * S, None

    def subj_query(self, P, O, core=None):
        return P * O

    def subj_query_vjp(self, G, P, O, core=None):
        return G * O, G * P, None

    def rel_query(self, S, O, core=None):
        return S * O

    def rel_query_vjp(self, G, S, O, core=None):
        return G * O, G * S, None


class CP(DistMult):
    """DistMult arithmetic with separate subject-role and object-role entity tables."""

    name = "cp"
    split_entity_tables = True


def _halves(X):
    d = X.shape[-1] // 2
    return X[..., :d], X[..., d:]


class ComplEx(Family):
    name = "complex"

    def obj_query(self, S, P, core=None):
        a, b = _halves(S)
        c, d = _halves(P)
        return np.concatenate([a * c - b * d, a * d + b * c], axis=-1)

    def obj_query_vjp(self, G, S, P, core=None):
        a, b = _halves(S)
        c, d = _halves(P)
        x, y = _halves(G)
        dS = np.concatenate([x * c + y * d, y * c - x * d], axis=-1)
        dP = np.concatenate([x * a + y * b, y * a - x * b], axis=-1)
        return dS, dP, None

    def subj_query(self, P, O, core=None):
        c, d = _halves(P)
        e, f = _halves(O)
        return np.concatenate([c * e + d * f, c * f - d * e], axis=-1)

    def subj_query_vjp(self, G, P, O, core=None):
        c, d = _halves(P)
        e, f = _halves(O)
        x, y = _halves(G)
        dP = np.concatenate([x * e + y * f, x * f - y * e], axis=-1)
        dO = np.concatenate([x * c - y * d, x * d + y * c], axis=-1)
        return dP, dO, None

    def rel_query(self, S, O, core=None):
        a, b = _halves(S)
        e, f = _halves(O)
        return np.concatenate([a * e + b * f, a * f - b * e], axis=-1)

    def rel_query_vjp(self, G, S, O, core=None):
        a, b = _halves(S)
        e, f = _halves(O)
        x, y = _halves(G)
        dS = np.concatenate([x * e + y * f, x * f - y * e], axis=-1)
        dO = np.concatenate([x * a - y * b, x * b + y * a], axis=-1)
        return dS, dO, None


class Rescal(Family):
    """Relation rows hold a row-major flattened K x K matrix."""

    name = "rescal"

    def relation_dim(self, dim, relation_dim):
        return dim * dim

    @staticmethod
    def _mat(P):
        k = int(round(np.sqrt(P.shape[-1])))
        return P.reshape(P.shape[:-1] + (k, k))

    def obj_query(self, S, P, core=None):
        return np.einsum("...i,...ij->...j", S, self._mat(P))

    def obj_query_vjp(self, G, S, P, core=None):
        M = self._mat(P)
        dS = np.einsum("...j,...ij->...i", G, M)
        dP = np.einsum("...i,...j->...ij", S, G).reshape(P.shape)
        return dS, dP, None

    def subj_query(self, P, O, core=None):
        return np.einsum("...ij,...j->...i", self._mat(P), O)

    def subj_query_vjp(self, G, P, O, core=None):
        M = self._mat(P)
        dP = np.einsum("...i,...j->...ij", G, O).reshape(P.shape)
        dO = np.einsum("...ij,...i->...j", M, G)
        return dP, dO, None

    def rel_query(self, S, O, core=None):
        Q = np.einsum("...i,...j->...ij", S, O)
        return Q.reshape(Q.shape[:-2] + (-1,))

    def rel_query_vjp(self, G, S, O, core=None):
        M = self._mat(G)
        return np.einsum("...ij,...j->...i", M, O), np.einsum("...ij,...i->...j", M, S), None


class Tucker(Family):
    """Core ``W`` has shape (k_e, k_r, k_e); subject and object share the entity dim."""

    name = "tucker"

    def relation_dim(self, dim, relation_dim):
        return relation_dim or dim

    def obj_query(self, S, P, core):
        return np.einsum("ijk,...i,...j->...k", core, S, P, optimize=True)

    def obj_query_vjp(self, G, S, P, core):
        dS = np.einsum("ijk,...j,...k->...i", core, P, G, optimize=True)
        dP = np.einsum("ijk,...i,...k->...j", core, S, G, optimize=True)
        dW = np.einsum("...i,...j,...k->ijk", S, P, G, optimize=True)
        return dS, dP, dW

    def subj_query(self, P, O, core):
        return np.einsum("ijk,...j,...k->...i", core, P, O, optimize=True)

    def subj_query_vjp(self, G, P, O, core):
        dP = np.einsum("ijk,...i,...k->...j", core, G, O, optimize=True)
        dO = np.einsum("ijk,...i,...j->...k", core, G, P, optimize=True)
        dW = np.einsum("...i,...j,...k->ijk", G, P, O, optimize=True)
        return dP, dO, dW

    def rel_query(self, S, O, core):
        return np.einsum("ijk,...i,...k->...j", core, S, O, optimize=True)

    def rel_query_vjp(self, G, S, O, core):
        dS = np.einsum("ijk,...j,...k->...i", core, G, O, optimize=True)
        dO = np.einsum("ijk,...i,...j->...k", core, S, G, optimize=True)
        dW = np.einsum("...i,...j,...k->ijk", S, G, O, optimize=True)
        return dS, dO, dW


_FAMILY_CLASSES = {c.name: c for c in (DistMult, ComplEx, CP, Rescal, Tucker)}


def get_family(name: str) -> Family:
    try:
        return _FAMILY_CLASSES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown model family {name!r}; expected one of {FAMILIES}") from None


# --- model spec and parameters ---------------------------------------------------


@dataclass
class ModelSpec:
    family: str
    entity_dim: int
    relation_dim: int | None = None
    init_scale: float = 0.02

    def __post_init__(self):
        self.family = self.family.lower()
        fam = get_family(self.family)
        if self.entity_dim < 1:
            raise ValueError("entity_dim must be positive")
        if self.family == "complex" and self.entity_dim % 2:
            raise ShapeError("ComplEx needs an even entity_dim ([real | imag] halves)")
        if self.family != "tucker":
            self.relation_dim = fam.relation_dim(self.entity_dim, self.relation_dim)
        elif self.relation_dim is None:
            self.relation_dim = self.entity_dim

    @property
    def impl(self) -> Family:
        return get_family(self.family)


@dataclass
class FactorizationModel:
    """Parameter tables for one scoring family.

    ``params`` always holds ``entity`` and ``relation``; CP adds ``entity_obj``
    and TuckER adds ``core``.
    """

    spec: ModelSpec
    num_entities: int
    num_relations: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, spec: ModelSpec, num_entities: int, num_relations: int, rng: np.random.Generator):
        m = cls(spec, num_entities, num_relations)
        m.params["entity"] = m.draw_entity_table(rng)
        m.params["relation"] = rng.normal(0.0, spec.init_scale, (num_relations, spec.relation_dim))
        if spec.family == "cp":
            m.params["entity_obj"] = m.draw_entity_table(rng)
        if spec.family == "tucker":
            k, kr = spec.entity_dim, spec.relation_dim
            m.params["core"] = rng.normal(0.0, 1.0 / np.sqrt(k * kr * k), (k, kr, k))
        return m

    def draw_entity_table(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, self.spec.init_scale, (self.num_entities, self.spec.entity_dim))

    @property
    def family(self) -> Family:
        return self.spec.impl

    @property
    def entity_table_names(self) -> tuple[str, ...]:
        return ("entity", "entity_obj") if self.spec.family == "cp" else ("entity",)

    @property
    def subject_table(self) -> np.ndarray:
        return self.params["entity"]

    @property
    def object_table(self) -> np.ndarray:
        return self.params.get("entity_obj", self.params["entity"])

    @property
    def core(self):
        return self.params.get("core")

    def copy(self) -> FactorizationModel:
        return FactorizationModel(
            self.spec, self.num_entities, self.num_relations, {k: v.copy() for k, v in self.params.items()}
        )

    def _check(self, e=None, r=None):
        for x in np.atleast_1d(e) if e is not None else ():
            if not 0 <= x < self.num_entities:
                raise IndexError(f"entity id {x} out of range")
        for x in np.atleast_1d(r) if r is not None else ():
            if not 0 <= x < self.num_relations:
                raise IndexError(f"relation id {x} out of range")

    # batched scorers over all candidates

    def score_triples(self, triples: np.ndarray) -> np.ndarray:
        t = np.asarray(triples).reshape(-1, 3)
        S, P, O = self.subject_table[t[:, 0]], self.params["relation"][t[:, 1]], self.object_table[t[:, 2]]
        return np.sum(self.family.obj_query(S, P, self.core) * O, axis=-1)

    def score_objects(self, s, p) -> np.ndarray:
        """Scores of (s[b], p[b], e) for every entity e; shape (B, |E|)."""
        s, p = np.atleast_1d(s), np.atleast_1d(p)
        self._check(s, p)
        Q = self.family.obj_query(self.subject_table[s], self.params["relation"][p], self.core)
        return Q @ self.object_table.T

    def score_subjects(self, p, o) -> np.ndarray:
        p, o = np.atleast_1d(p), np.atleast_1d(o)
        self._check(o, p)
        Q = self.family.subj_query(self.params["relation"][p], self.object_table[o], self.core)
        return Q @ self.subject_table.T

    def score_relations(self, s, o) -> np.ndarray:
        s, o = np.atleast_1d(s), np.atleast_1d(o)
        self._check(np.concatenate([s, o]))
        Q = self.family.rel_query(self.subject_table[s], self.object_table[o], self.core)
        return Q @ self.params["relation"].T

    def score_one(self, s: int, p: int, o: int) -> float:
        """Scalar score through the family's reference scorer (no batching)."""
        self._check([s, o], [p])
        sv, pv, ov = self.subject_table[s], self.params["relation"][p], self.object_table[o]
        fam = self.spec.family
        if fam == "distmult":
            return score_distmult(sv, pv, ov)
        if fam == "complex":
            return score_complex(sv, pv, ov)
        if fam == "cp":
            return score_cp(sv, pv, ov)
        if fam == "rescal":
            k = self.spec.entity_dim
            return score_rescal(sv, pv.reshape(k, k), ov)
        return score_tucker(sv, pv, ov, self.core)


def score_all_objects(model: FactorizationModel, s: int, p: int) -> np.ndarray:
    """Vector of Γ(s, p, e) over all entities, via one matrix-vector product."""
    return model.score_objects([s], [p])[0]


def grad_score(spec: ModelSpec | str, s, p, o, core=None):
    """Analytic (dΓ/ds, dΓ/dp, dΓ/do) for a single triple; TuckER also returns dΓ/dW.

    For RESCAL ``p`` may be given as a K x K matrix and dΓ/dP = s oᵀ is
    returned in the same shape.
    """
    name = spec.family if isinstance(spec, ModelSpec) else spec.lower()
    fam = get_family(name)
    s, p, o = (np.asarray(x, dtype=np.float64) for x in (s, p, o))
    if name == "rescal":
        if p.ndim == 2:
            if p.shape != (s.shape[0], o.shape[0]):
                raise ShapeError("RESCAL matrix shape mismatch")
            return p @ o, np.outer(s, o), s @ p
    elif name == "tucker":
        if core is None or np.shape(core) != (s.shape[0], p.shape[0], o.shape[0]):
            raise ShapeError("TuckER gradient needs a conformable core tensor")
    else:
        _check_same(s, p, o)
        if name == "complex" and s.shape[0] % 2:
            raise ShapeError("ComplEx vectors need even length")
    ds, dp, do, dcore = fam.grad(s, p, o, core)
    if name == "tucker":
        return ds, dp, do, dcore
    return ds, dp, do
