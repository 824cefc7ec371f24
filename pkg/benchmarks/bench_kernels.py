"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one CSV row per kernel: name, size, python seconds, cython seconds,
speedup. Both backends are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from dilo import _kernels_py

try:
    from dilo import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    y = rng.normal(0.0, 3.0, 1_000_000)
    table = rng.normal(size=(25, 25))
    i = rng.integers(25, size=200_000)
    j = rng.integers(25, size=200_000)
    vals = rng.normal(size=200_000)
    S, A = 12, 4
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.normal(size=(S, S, A))

    def scatter(impl):
        t = np.zeros((25, 25))
        impl.scatter_add_pairs(t, i, j, vals)
        return t

    yield "chi2_conjugate", y.size, lambda impl: impl.chi2_conjugate(y)
    yield "gather_pairs", i.size, lambda impl: impl.gather_pairs(table, i, j)
    yield "scatter_add_pairs", i.size, scatter
    yield "pair_value_iteration", S * S * A, lambda impl: impl.pair_value_iteration(P, R, 0.9, 1e-10, 10_000)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print("kernel,size,python_s,cython_s,speedup")
    for name, size, fn in cases(np.random.default_rng(0)):
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name},{size},{t_py:.6f},nan,nan")
            continue
        if not _same(fn(_kernels_py), fn(_kernels)):
            raise SystemExit(f"{name}: backends disagree")
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name},{size},{t_py:.6f},{t_cy:.6f},{t_py / t_cy:.2f}")


if __name__ == "__main__":
    main()
