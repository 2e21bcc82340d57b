"""Time the numba kernels against their numpy twins and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 4000]

The first numba call includes JIT compilation (or a cache load); it is
reported separately and excluded from the steady-state timings.
"""
import argparse
import time

import numpy as np

from upfwatch.ml import _kernels as K


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def cases(n, d, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, 3, n).astype(np.int64)
    idx = np.arange(n, dtype=np.int64)
    feats = np.arange(d, dtype=np.int64)
    grad = rng.standard_normal(n)
    hess = rng.random(n) * 0.25
    q = rng.standard_normal((n // 4, d))
    # a random full tree of depth 6 for tree_apply
    n_nodes = 2**7 - 1
    feature = np.where(np.arange(n_nodes) < 2**6 - 1, rng.integers(0, d, n_nodes), -1).astype(np.int64)
    threshold = rng.standard_normal(n_nodes)
    left = np.where(feature >= 0, 2 * np.arange(n_nodes) + 1, -1).astype(np.int64)
    right = np.where(feature >= 0, 2 * np.arange(n_nodes) + 2, -1).astype(np.int64)
    return {
        "knn_neighbors": (q, X, 5),
        "gini_best_split": (X, y, idx, feats, 3, 1),
        "newton_best_split": (X, grad, hess, idx, feats, 1, 1e-3, 1.0),
        "tree_apply": (X, feature, threshold, left, right),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"n={args.n} d={args.d} repeat={args.repeat}")
    print(f"{'kernel':20s} {'first nb':>10s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s} equal")
    for name, call_args in cases(args.n, args.d).items():
        nb = getattr(K.numba_impl, name)
        np_ = getattr(K.numpy_impl, name)
        t0 = time.perf_counter()
        nb(*call_args)
        first = time.perf_counter() - t0
        t_nb, out_nb = _time(lambda: nb(*call_args), args.repeat)
        t_np, out_np = _time(lambda: np_(*call_args), args.repeat)
        print(f"{name:20s} {first:10.4f} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f} {_same(out_nb, out_np)}")


if __name__ == "__main__":
    main()
