"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --e2e      # also a short UMLS training run per backend

The end-to-end part runs a child process per backend with REFACTOR_KGC_NUMBA
set, since the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from refactor_kgc import kernels

E2E_SNIPPET = """
import time, numpy as np
from refactor_kgc import kernels
from refactor_kgc.graph import load_dataset, bundled_dataset_dir
from refactor_kgc.scoring import ModelSpec, FactorizationModel
from refactor_kgc.training import TrainConfig, FMTrainer
from refactor_kgc.evaluation import evaluate
ds = load_dataset(bundled_dataset_dir("umls"))
cfg = TrainConfig(ModelSpec("complex", {dim}, None, 1e-3), learning_rate=0.1, batch_size=10,
                  rp_weight=0.5, adagrad_eps=1e-20, entity_terms="object")
rng = np.random.default_rng(0)
m = FactorizationModel.initialize(cfg.model, ds.train.num_entities, ds.train.num_relations, rng)
tr = FMTrainer(m, cfg, ds.train.triples, ds.train.num_base_relations, rng)
tr.run_epoch()  # warm-up (jit compile)
t0 = time.perf_counter()
for _ in range({epochs}):
    tr.run_epoch()
t1 = time.perf_counter()
mrr = evaluate(m, ds.test.triples, ds.filter_index(), ds.train.num_base_relations).mrr
t2 = time.perf_counter()
print(kernels.BACKEND, t1 - t0, t2 - t1, mrr)
"""


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scatter(rng, repeat):
    out = np.zeros((135, 2000))
    idx = rng.integers(0, 135, 20)
    rows = rng.normal(size=(20, 2000))
    return {
        "numpy": best_of(lambda: kernels.scatter_add_rows_numpy(out, idx, rows), repeat),
        "numba": best_of(lambda: kernels.scatter_add_rows_numba(out, idx, rows), repeat),
    }


def bench_adagrad(rng, repeat):
    p, g = rng.normal(size=(135, 2000)), rng.normal(size=(135, 2000))
    s = np.zeros_like(p)
    return {
        "numpy": best_of(lambda: kernels.adagrad_update_numpy(p, g, s, 0.01, 1e-20), repeat),
        "numba": best_of(lambda: kernels.adagrad_update_numba(p, g, s, 0.01, 1e-20), repeat),
    }


def bench_ranks(rng, repeat):
    n_q, n_e = 1322, 135
    scores = rng.normal(size=(n_q, n_e))
    targets = rng.integers(0, n_e, n_q)
    counts = rng.integers(0, 20, n_q)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    fidx = rng.integers(0, n_e, int(ptr[-1]))
    # the target itself must never be filtered
    for q in range(n_q):
        seg = fidx[ptr[q] : ptr[q + 1]]
        seg[seg == targets[q]] = (targets[q] + 1) % n_e
    return {
        "numpy": best_of(lambda: kernels.filtered_ranks_numpy(scores, targets, ptr, fidx), repeat),
        "numba": best_of(lambda: kernels.filtered_ranks_numba(scores, targets, ptr, fidx), repeat),
    }


def run_e2e(dim: int, epochs: int) -> None:
    code = E2E_SNIPPET.format(dim=dim, epochs=epochs)
    for flag in ("0", "1"):
        env = dict(os.environ, REFACTOR_KGC_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, train_s, eval_s, mrr = out.stdout.split()
        print(f"e2e  {backend:<6} train {float(train_s):7.2f}s for {epochs} epochs  eval {float(eval_s):5.2f}s  test MRR {float(mrr):.4f}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--e2e", action="store_true")
    ap.add_argument("--dim", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=2)
    args = ap.parse_args(argv)

    if kernels.numba is None:
        print("numba is not installed; nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    # compile once before timing
    bench_scatter(rng, 1), bench_adagrad(rng, 1), bench_ranks(rng, 1)
    print(f"{'kernel':<14}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, fn in (("scatter_add", bench_scatter), ("adagrad", bench_adagrad), ("filtered_rank", bench_ranks)):
        t = fn(rng, args.repeat)
        print(f"{name:<14}{t['numpy'] * 1e6:10.1f}us{t['numba'] * 1e6:10.1f}us{t['numpy'] / t['numba']:9.2f}x")
    if args.e2e:
        run_e2e(args.dim, args.epochs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
