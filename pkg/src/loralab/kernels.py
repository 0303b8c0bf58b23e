"""Kernel dispatch: compiled extension when built, pure Python otherwise.

Set ``LORALAB_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by tests that compare both paths).
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py as python_kernels

try:
    if os.environ.get("LORALAB_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels forced")
    from . import _kernels as compiled_kernels
except ImportError:
    compiled_kernels = None

BACKEND = "cython" if compiled_kernels is not None else "python"
_impl = compiled_kernels if compiled_kernels is not None else python_kernels


def jacobi_sweeps(G: np.ndarray, Vt: np.ndarray, tol: float, max_sweeps: int):
    return _impl.jacobi_sweeps(G, Vt, float(tol), int(max_sweeps))


def householder_qr(A: np.ndarray):
    return _impl.householder_qr(np.ascontiguousarray(A, dtype=np.float64))


def lcs_length(a, b) -> int:
    if compiled_kernels is None:
        return python_kernels.lcs_length(a, b)
    return compiled_kernels.lcs_length(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
