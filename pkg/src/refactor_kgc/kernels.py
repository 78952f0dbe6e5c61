"""Hot inner loops, each with a numba kernel and a pure-numpy fallback.

The backend is chosen once at import time from ``REFACTOR_KGC_NUMBA``
(``0``/``false``/``off`` selects numpy). Both paths perform the same
floating-point operations in the same order, so results are bitwise equal.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("REFACTOR_KGC_NUMBA", "1").lower() not in ("0", "false", "off", "no")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --- scatter-add of rows -----------------------------------------------------


def scatter_add_rows_numpy(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(out, idx, rows)


# --- filtered ranking --------------------------------------------------------


def filtered_ranks_numpy(scores, targets, filt_ptr, filt_idx):
    """Average-tie filtered rank of ``targets[q]`` in ``scores[q]``.

    Candidates ``filt_idx[filt_ptr[q]:filt_ptr[q+1]]`` are removed first.
    """
    nq, n = scores.shape
    keep = np.ones((nq, n), dtype=bool)
    counts = np.diff(filt_ptr)
    keep[np.repeat(np.arange(nq), counts), filt_idx] = False
    rows = np.arange(nq)
    keep[rows, targets] = False
    t = scores[rows, targets][:, None]
    greater = np.count_nonzero((scores > t) & keep, axis=1)
    ties = np.count_nonzero((scores == t) & keep, axis=1)
    return 1.0 + greater + 0.5 * ties


# --- adagrad -----------------------------------------------------------------


def adagrad_update_numpy(param, grad, accum, lr, eps):
    accum += grad * grad
    param -= lr * grad / np.sqrt(accum + eps)


if numba is not None:

    @numba.njit(cache=True)
    def scatter_add_rows_numba(out, idx, rows):
        k = out.shape[1]
        for i in range(idx.shape[0]):
            j = idx[i]
            for c in range(k):
                out[j, c] += rows[i, c]

    @numba.njit(cache=True)
    def filtered_ranks_numba(scores, targets, filt_ptr, filt_idx):
        nq, n = scores.shape
        ranks = np.empty(nq, dtype=np.float64)
        seen = np.zeros(n, dtype=np.bool_)
        for q in range(nq):
            tgt = targets[q]
            t = scores[q, tgt]
            # branchless count over the whole row, then take the filtered ones back out
            greater = 0
            ties = 0
            for c in range(n):
                s = scores[q, c]
                greater += s > t
                ties += s == t
            ties -= 1  # the target itself
            seen[tgt] = True
            for j in range(filt_ptr[q], filt_ptr[q + 1]):
                c = filt_idx[j]
                if seen[c]:
                    continue
                seen[c] = True
                s = scores[q, c]
                greater -= s > t
                ties -= s == t
            seen[tgt] = False
            for j in range(filt_ptr[q], filt_ptr[q + 1]):
                seen[filt_idx[j]] = False
            ranks[q] = 1.0 + greater + 0.5 * ties
        return ranks

    @numba.njit(cache=True)
    def _adagrad_flat(p, g, a, lr, eps):
        for i in range(p.shape[0]):
            gi = g[i]
            a[i] += gi * gi
            p[i] -= lr * gi / np.sqrt(a[i] + eps)

    def adagrad_update_numba(param, grad, accum, lr, eps):
        _adagrad_flat(param.reshape(-1), grad.reshape(-1), accum.reshape(-1), float(lr), float(eps))

else:  # pragma: no cover
    scatter_add_rows_numba = scatter_add_rows_numpy
    filtered_ranks_numba = filtered_ranks_numpy
    adagrad_update_numba = adagrad_update_numpy


def _pick(nb, np_):
    return nb if USE_NUMBA else np_


_scatter = _pick(scatter_add_rows_numba, scatter_add_rows_numpy)
_ranks = _pick(filtered_ranks_numba, filtered_ranks_numpy)
_adagrad = _pick(adagrad_update_numba, adagrad_update_numpy)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """``out[idx[i]] += rows[i]`` for each i, in index order (duplicates accumulate)."""
    _scatter(out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(rows, dtype=out.dtype))


def filtered_ranks(scores: np.ndarray, targets: np.ndarray, filt_ptr: np.ndarray, filt_idx: np.ndarray) -> np.ndarray:
    return _ranks(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(targets, dtype=np.int64),
        np.ascontiguousarray(filt_ptr, dtype=np.int64),
        np.ascontiguousarray(filt_idx, dtype=np.int64),
    )


def adagrad_update(param: np.ndarray, grad: np.ndarray, accum: np.ndarray, lr: float, eps: float) -> None:
    """In place: ``accum += grad**2; param -= lr * grad / sqrt(accum + eps)``."""
    if not (param.flags.c_contiguous and accum.flags.c_contiguous):
        raise ValueError("adagrad_update needs C-contiguous param and accumulator")
    _adagrad(param, np.ascontiguousarray(grad, dtype=param.dtype), accum, lr, eps)
