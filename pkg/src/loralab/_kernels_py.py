"""Pure-Python fallbacks for the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import math

import numpy as np

NEGLIGIBLE = 1e-28


def jacobi_sweeps(G: np.ndarray, Vt: np.ndarray, tol: float, max_sweeps: int):
    n = G.shape[0]
    off = 0.0
    # rows below this squared norm are rounding noise; rotating them never settles
    floor = float(np.einsum("ij,ij->", G, G)) * NEGLIGIBLE
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            gi_row = G[i]
            for j in range(i + 1, n):
                gj_row = G[j]
                alpha = float(gi_row @ gi_row)
                beta = float(gj_row @ gj_row)
                gamma = float(gi_row @ gj_row)
                if alpha <= floor or beta <= floor:
                    continue
                corr = abs(gamma) / (math.sqrt(alpha) * math.sqrt(beta))
                if corr > off:
                    off = corr
                if corr <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                gi = gi_row.copy()
                gi_row[:] = c * gi - s * gj_row
                gj_row[:] = s * gi + c * gj_row
                vi = Vt[i].copy()
                Vt[i] = c * vi - s * Vt[j]
                Vt[j] = s * vi + c * Vt[j]
        if off <= tol:
            return sweep + 1, off
    return max_sweeps, off


def householder_qr(A: np.ndarray):
    R = np.array(A, dtype=np.float64, copy=True)
    m, n = R.shape
    kmax = min(m, n)
    vs: list[np.ndarray | None] = []
    for k in range(kmax):
        x = R[k:, k]
        norm = math.sqrt(float(x @ x))
        if norm == 0.0:
            vs.append(None)
            continue
        alpha = -norm if R[k, k] >= 0.0 else norm
        v = x.copy()
        v[0] -= alpha
        vnorm = math.sqrt(float(v @ v))
        if vnorm == 0.0:
            vs.append(None)
            continue
        v /= vnorm
        R[k:, k:] -= 2.0 * np.outer(v, v @ R[k:, k:])
        R[k, k] = alpha
        R[k + 1:, k] = 0.0
        vs.append(v)
    Q = np.zeros((m, kmax))
    Q[np.arange(kmax), np.arange(kmax)] = 1.0
    for k in range(kmax - 1, -1, -1):
        v = vs[k]
        if v is None:
            continue
        Q[k:, :] -= 2.0 * np.outer(v, v @ Q[k:, :])
    for k in range(kmax):
        if R[k, k] < 0.0:
            R[k, k:] = -R[k, k:]
            Q[:, k] = -Q[:, k]
    return Q, R[:kmax, :].copy()


def lcs_length(a, b) -> int:
    if len(a) == 0 or len(b) == 0:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            elif prev[j] >= cur[j - 1]:
                cur[j] = prev[j]
            else:
                cur[j] = cur[j - 1]
        prev = cur
    return prev[-1]
