"""Compare the numba and numpy paths of the hot kernels.

    python benchmarks/bench_kernels.py [--sizes 256 1024 4096] [--repeat 5]
"""

import argparse
import time

import numpy as np

from shapediff import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--assign-sizes", type=int, nargs="+", default=[64, 256, 512])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--k", type=int, default=8)
    args = p.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)

    # compile once outside the timings
    X = rng.standard_normal((16, 3))
    kernels.nearest(X, X, use_numba=True)
    kernels.knn(X, 4, use_numba=True)
    kernels.assignment(rng.random((4, 4)), use_numba=True)

    print(f"{'kernel':<12}{'n':>8}{'numpy s':>12}{'numba s':>12}{'speedup':>10}")
    rows = []
    for n in args.sizes:
        P, Q = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        rows.append(("nearest", n, lambda u, P=P, Q=Q: kernels.nearest(P, Q, use_numba=u)))
        rows.append(("knn", n, lambda u, P=P: kernels.knn(P, args.k, use_numba=u)))
    for n in args.assign_sizes:
        C = rng.random((n, n))
        rows.append(("assignment", n, lambda u, C=C: kernels.assignment(C, use_numba=u)))
    for name, n, fn in rows:
        a = fn(False)
        b = fn(True)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        tn = best_of(lambda: fn(False), args.repeat)
        tb = best_of(lambda: fn(True), args.repeat)
        flag = "" if same else "  MISMATCH"
        print(f"{name:<12}{n:>8}{tn:>12.4g}{tb:>12.4g}{tn / tb:>10.1f}{flag}")


if __name__ == "__main__":
    main()
