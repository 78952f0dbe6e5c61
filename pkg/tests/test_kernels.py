"""The numba kernels and their numpy fallbacks must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest

from refactor_kgc import kernels

pytestmark = pytest.mark.skipif(kernels.numba is None, reason="numba not installed")


def test_scatter_add(rng):
    idx = rng.integers(0, 15, 300)
    rows = rng.normal(size=(300, 6))
    a, b = np.zeros((15, 6)), np.zeros((15, 6))
    kernels.scatter_add_rows_numpy(a, idx, rows)
    kernels.scatter_add_rows_numba(b, idx, rows)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    expected = np.zeros((15, 6))
    for i, r in zip(idx, rows):
        expected[i] += r
    assert np.allclose(a, expected, atol=1e-12)


def test_filtered_ranks(rng):
    scores = rng.integers(-2, 3, (40, 25)).astype(float)
    targets = rng.integers(0, 25, 40)
    sets = [sorted(set(rng.integers(0, 25, 6).tolist()) - {int(t)}) for t in targets]
    ptr = np.concatenate([[0], np.cumsum([len(s) for s in sets])]).astype(np.int64)
    idx = np.array([e for s in sets for e in s], dtype=np.int64)
    a = kernels.filtered_ranks_numpy(scores, targets, ptr, idx)
    b = kernels.filtered_ranks_numba(scores, targets, ptr, idx)
    assert np.array_equal(a, b)


def test_adagrad(rng):
    p = rng.normal(size=(9, 4))
    q = p.copy()
    sa, sb = np.zeros_like(p), np.zeros_like(p)
    for _ in range(3):
        g = rng.normal(size=p.shape)
        kernels.adagrad_update_numpy(p, g, sa, 0.05, 1e-10)
        kernels.adagrad_update_numba(q, g, sb, 0.05, 1e-10)
    assert np.allclose(p, q, rtol=0, atol=1e-15) and np.array_equal(sa, sb)


def test_env_flag_selects_numpy():
    env = dict(os.environ, REFACTOR_KGC_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "from refactor_kgc import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
