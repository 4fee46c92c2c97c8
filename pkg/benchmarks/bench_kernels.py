"""Time the compiled kernels against the pure-Python fallback.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Prints one
line per kernel with the best-of-N wall time for each backend and the
speed-up of the compiled version.
"""

import argparse
import timeit

import numpy as np

from eprop import _kernels_py, kernels


def _cases(B=16, T=1000, n=100, n_in=100):
    rng = np.random.default_rng(0)
    cur = np.ascontiguousarray(rng.normal(0, 0.3, size=(B, T, n)))
    w_rec = rng.normal(0, 1 / np.sqrt(n), size=(n, n))
    np.fill_diagonal(w_rec, 0.0)
    beta = np.concatenate([np.zeros(n // 2), np.full(n - n // 2, 0.03)])
    x = np.ascontiguousarray(rng.normal(size=(B, T, n_in)))
    h = np.ascontiguousarray(np.abs(rng.normal(0, 0.1, size=(B, T, n))))
    c = np.ascontiguousarray(rng.normal(size=(B, T, n)))
    return {
        "spiking_forward": (cur, np.ascontiguousarray(w_rec), 0.95, 0.5, 0.3, 5, beta, 0.999),
        "leaky_filter": (x, 0.95, False),
        "adaptation_adjoint": (c, h, beta, 0.999),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':<20} {'python [s]':>12} {'cython [s]':>12} {'speed-up':>9}")
    for name, call_args in _cases().items():
        py = min(timeit.repeat(lambda: getattr(_kernels_py, name)(*call_args), number=1, repeat=args.repeat))
        if "cython" in backends:
            fn = getattr(backends["cython"], name)
            cy = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
            print(f"{name:<20} {py:12.4f} {cy:12.4f} {py / cy:8.1f}x")
        else:
            print(f"{name:<20} {py:12.4f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
