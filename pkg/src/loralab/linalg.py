"""Factorizations used by the PiSSA and OLoRA initializers."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NumericError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


def _require_finite(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise NumericError(f"{name} expects a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError(f"{name} input has non-finite entries")
    return M


def _complete_columns(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``U`` not in ``keep`` by an orthonormal completion."""
    m, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nrm = np.linalg.norm(v)
            if nrm > 1e-8:
                v /= nrm
                break
        out[:, j] = v
        basis.append(v)
    return out


def svd(M, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS):
    """Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

    Args:
        M: real matrix of shape (m, n).
        tol: convergence threshold on the largest normalized column correlation.
        max_sweeps: iteration cap; exceeding it raises ``NumericError``.

    Returns:
        ``(U, S, V)`` with ``M == U @ diag(S) @ V.T``, ``S`` non-negative and
        descending, ``U`` of shape (m, k) and ``V`` of shape (n, k) where
        k = min(m, n), both column-orthonormal.
    """
    M = _require_finite(M, "svd")
    m, n = M.shape
    if m < n:
        U, S, V = svd(M.T, tol, max_sweeps)
        return V, S, U
    G = np.array(M.T, dtype=np.float64, order="C", copy=True)
    Vt = np.eye(n)
    sweeps, off = kernels.jacobi_sweeps(G, Vt, tol, max_sweeps)
    if off > tol:
        raise NumericError(
            f"Jacobi SVD did not converge after {sweeps} sweeps; off-diagonal residual {off:.3e}"
        )
    S = np.sqrt(np.einsum("ij,ij->i", G, G))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    G = G[order]
    V = Vt[order].T.copy()
    cutoff = (S[0] if n else 0.0) * max(m, n) * np.finfo(np.float64).eps
    keep = S > cutoff
    U = np.zeros((m, n))
    U[:, keep] = (G[keep] / S[keep, None]).T
    if not keep.all():
        U = _complete_columns(U, keep)
    return U, S, V


def qr(M):
    """Householder QR. Returns thin ``(Q, R)``: Q (m, k) orthonormal columns,
    R (k, n) upper-triangular with non-negative diagonal, k = min(m, n)."""
    M = _require_finite(M, "qr")
    return kernels.householder_qr(M)
