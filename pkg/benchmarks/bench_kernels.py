"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 1000 5000]

Each kernel runs on the same inputs under both backends; results must agree
before timings are reported.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from residual_lens import kernels


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_two_nearest(sizes, dim, repeat, rng):
    for n in sizes:
        x = rng.standard_normal((n, dim))
        ref = kernels.fallback.two_nearest(x)
        got = kernels.native.two_nearest(x)
        assert np.allclose(ref, got, rtol=1e-12, atol=0), "backends disagree on two_nearest"
        tp = _best(lambda: kernels.fallback.two_nearest(x), repeat)
        tn = _best(lambda: kernels.native.two_nearest(x), repeat)
        yield "two_nearest", f"n={n},d={dim}", tp, tn


def bench_greedy_match(sizes, repeat, rng):
    for k in sizes:
        s = np.abs(rng.standard_normal((k, k)))
        ref = kernels.fallback.greedy_match(s)
        got = kernels.native.greedy_match(s)
        assert all(np.array_equal(a, b) for a, b in zip(ref, got)), "backends disagree on greedy_match"
        tp = _best(lambda: kernels.fallback.greedy_match(s), repeat)
        tn = _best(lambda: kernels.native.greedy_match(s), repeat)
        yield "greedy_match", f"k={k}", tp, tn


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 5000])
    ap.add_argument("--match-sizes", type=int, nargs="+", default=[64, 256, 768])
    ap.add_argument("--dim", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if kernels.native is None:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<14}{'size':<16}{'python [s]':>12}{'native [s]':>12}{'speedup':>10}")
    rows = list(bench_two_nearest(args.sizes, args.dim, args.repeat, rng))
    rows += list(bench_greedy_match(args.match_sizes, args.repeat, rng))
    for name, size, tp, tn in rows:
        print(f"{name:<14}{size:<16}{tp:>12.4f}{tn:>12.4f}{tp / tn:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
