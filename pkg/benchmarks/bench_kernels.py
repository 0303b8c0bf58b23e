"""Time the compiled kernels against their pure-Python fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from loralab import kernels


def _jacobi_case(m: int, n: int, seed: int):
    M = np.random.default_rng(seed).normal(size=(m, n))

    def run(impl):
        G = np.array(M.T, order="C", copy=True)
        Vt = np.eye(n)
        impl.jacobi_sweeps(G, Vt, 1e-12, 100)

    return run


def _qr_case(m: int, n: int, seed: int):
    M = np.random.default_rng(seed).normal(size=(m, n))
    return lambda impl: impl.householder_qr(np.array(M, order="C", copy=True))


def _lcs_case(n: int, seed: int):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 20, n).astype(np.int64)
    b = rng.integers(0, 20, n).astype(np.int64)
    return lambda impl: impl.lcs_length(a, b)


CASES = {
    "jacobi_svd 32x32": _jacobi_case(32, 32, 0),
    "jacobi_svd 128x64": _jacobi_case(128, 64, 1),
    "householder_qr 64x64": _qr_case(64, 64, 2),
    "householder_qr 256x64": _qr_case(256, 64, 3),
    "lcs_length 40x40": _lcs_case(40, 4),
    "lcs_length 400x400": _lcs_case(400, 5),
}


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    compiled = kernels.compiled_kernels
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':<24}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}")
    for name, case in CASES.items():
        py = min(timeit.repeat(lambda: case(kernels.python_kernels), number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{name:<24}{py * 1e3:>12.2f}{'n/a':>14}{'':>10}")
            continue
        cy = min(timeit.repeat(lambda: case(compiled), number=1, repeat=args.repeat))
        print(f"{name:<24}{py * 1e3:>12.2f}{cy * 1e3:>14.3f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
