#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--n 1024] [--d 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from antkv.kernels import pure

try:
    from antkv import _ckernels as compiled
except ImportError:
    compiled = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=1024)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--block", type=int, default=64)
    ap.add_argument("--m", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n, d, b = args.n, args.d, args.block
    Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
    Qs = Q / np.sqrt(d)
    qn = np.sqrt((Q ** 2).sum(axis=1))
    _, L, M = pure.flash_aux(Qs, K, V, b, b, True)
    X = rng.standard_normal((n * (d // 8), 8))
    C = rng.standard_normal((args.m, 8))

    cases = {
        "flash_aux": lambda impl: impl.flash_aux(Qs, K, V, b, b, True),
        "ans_blocked": lambda impl: impl.ans_blocked(Qs, K, M, L, qn,
                                                     b, b, True),
        "assign_nearest": lambda impl: impl.assign_nearest(X, C),
    }
    print(f"n={n} d={d} block={b} m={args.m} (best of {args.repeat})")
    header = f"{'kernel':<16}{'pure (ms)':>12}{'compiled (ms)':>15}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, call in cases.items():
        t_pure = timeit(lambda: call(pure), args.repeat) * 1e3
        if compiled is None:
            print(f"{name:<16}{t_pure:>12.2f}{'n/a':>15}{'n/a':>9}")
            continue
        t_comp = timeit(lambda: call(compiled), args.repeat) * 1e3
        print(f"{name:<16}{t_pure:>12.2f}{t_comp:>15.2f}"
              f"{t_pure / t_comp:>8.1f}x")


if __name__ == "__main__":
    main()
