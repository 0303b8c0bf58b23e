# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: Jacobi rotations, Householder reflections, LCS table.

Each routine mirrors the pure-Python version in ``_kernels_py`` operation for
operation; ``loralab.kernels`` picks whichever is importable.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def jacobi_sweeps(double[:, ::1] G, double[:, ::1] Vt, double tol, int max_sweeps):
    """Orthogonalize the rows of ``G`` in place, accumulating rotations in ``Vt``.

    Returns ``(sweeps, off)`` where ``off`` is the largest normalized row
    correlation seen during the final sweep.
    """
    cdef Py_ssize_t n = G.shape[0]
    cdef Py_ssize_t m = G.shape[1]
    cdef Py_ssize_t nv = Vt.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double alpha, beta, gamma, corr, zeta, t, c, s, gi, gj, off = 0.0
    cdef double floor = 0.0
    cdef int sweep
    # rows below this squared norm are rounding noise; rotating them never settles
    for i in range(n):
        for k in range(m):
            floor += G[i, k] * G[i, k]
    floor *= 1e-28
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    alpha += G[i, k] * G[i, k]
                    beta += G[j, k] * G[j, k]
                    gamma += G[i, k] * G[j, k]
                if alpha <= floor or beta <= floor:
                    continue
                corr = fabs(gamma) / (sqrt(alpha) * sqrt(beta))
                if corr > off:
                    off = corr
                if corr <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    gi = G[i, k]
                    gj = G[j, k]
                    G[i, k] = c * gi - s * gj
                    G[j, k] = s * gi + c * gj
                for k in range(nv):
                    gi = Vt[i, k]
                    gj = Vt[j, k]
                    Vt[i, k] = c * gi - s * gj
                    Vt[j, k] = s * gi + c * gj
        if off <= tol:
            return sweep + 1, off
    return max_sweeps, off


def householder_qr(double[:, ::1] A):
    """Thin QR by Householder reflections. Returns ``(Q, R)`` with diag(R) >= 0."""
    cdef Py_ssize_t m = A.shape[0]
    cdef Py_ssize_t n = A.shape[1]
    cdef Py_ssize_t kmax = m if m < n else n
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Rarr = np.array(A, dtype=np.float64, copy=True)
    cdef double[:, ::1] R = Rarr
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Varr = np.zeros((kmax, m), dtype=np.float64)
    cdef double[:, ::1] V = Varr
    cdef cnp.ndarray[cnp.float64_t, ndim=1] active = np.zeros(kmax, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double norm, alpha, vnorm, dot
    for k in range(kmax):
        norm = 0.0
        for i in range(k, m):
            norm += R[i, k] * R[i, k]
        norm = sqrt(norm)
        if norm == 0.0:
            continue
        alpha = -norm if R[k, k] >= 0.0 else norm
        vnorm = 0.0
        for i in range(k, m):
            V[k, i] = R[i, k]
        V[k, k] -= alpha
        for i in range(k, m):
            vnorm += V[k, i] * V[k, i]
        if vnorm == 0.0:
            continue
        vnorm = sqrt(vnorm)
        for i in range(k, m):
            V[k, i] /= vnorm
        active[k] = 1.0
        for j in range(k, n):
            dot = 0.0
            for i in range(k, m):
                dot += V[k, i] * R[i, j]
            for i in range(k, m):
                R[i, j] -= 2.0 * V[k, i] * dot
        R[k, k] = alpha
        for i in range(k + 1, m):
            R[i, k] = 0.0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Qarr = np.zeros((m, kmax), dtype=np.float64)
    cdef double[:, ::1] Q = Qarr
    for i in range(kmax):
        Q[i, i] = 1.0
    for k in range(kmax - 1, -1, -1):
        if active[k] == 0.0:
            continue
        for j in range(kmax):
            dot = 0.0
            for i in range(k, m):
                dot += V[k, i] * Q[i, j]
            for i in range(k, m):
                Q[i, j] -= 2.0 * V[k, i] * dot
    for k in range(kmax):
        if R[k, k] < 0.0:
            for j in range(k, n):
                R[k, j] = -R[k, j]
            for i in range(m):
                Q[i, k] = -Q[i, k]
    return Qarr, Rarr[:kmax, :].copy()


def lcs_length(cnp.int64_t[::1] a, cnp.int64_t[::1] b):
    """Length of the longest common subsequence of two integer sequences."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0 or m == 0:
        return 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    cdef Py_ssize_t i, j
    for i in range(1, n + 1):
        cur[0] = 0
        for j in range(1, m + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
