"""Dense symmetric kernels: sorted eigendecomposition, projectors, nearest PSD."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AsymmetricMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetricEigen:
    values: np.ndarray  # descending, algebraic
    vectors: np.ndarray  # orthonormal columns aligned with ``values``

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column positive; argmax picks the lowest index on ties.
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _descending_order(values: np.ndarray, tie_tol: float) -> np.ndarray:
    """Descending order; eigenvalues within ``tie_tol`` keep their original column order."""
    order = np.argsort(-values, kind="stable")
    out = []
    i = 0
    n = len(order)
    while i < n:
        j = i + 1
        while j < n and values[order[i]] - values[order[j]] <= tie_tol:
            j += 1
        out.extend(sorted(order[i:j]))
        i = j
    return np.asarray(out, dtype=int)


def sym_eig_sorted(R, sym_tol: float = 1e-8) -> SymmetricEigen:
    """Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.

    Eigenvalues closer than ``1e-12 * max(1, max|lambda|)`` are treated as ties and
    keep LAPACK's column order, so degenerate eigenspaces (e.g. the identity) come
    back in a reproducible basis. Column signs follow :func:`_canonical_signs`.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {R.shape}")
    if R.shape[0] == 0:
        return SymmetricEigen(np.zeros(0), np.zeros((0, 0)))
    norm = np.linalg.norm(R)
    asym = np.linalg.norm(R - R.T)
    if asym > sym_tol * max(norm, np.finfo(float).tiny):
        raise AsymmetricMatrixError(f"matrix is not symmetric: ||R - R'||_F = {asym:.3e}")
    vals, vecs = np.linalg.eigh(0.5 * (R + R.T))
    tie_tol = 1e-12 * max(1.0, float(np.max(np.abs(vals))))
    order = _descending_order(vals, tie_tol)
    return SymmetricEigen(vals[order], _canonical_signs(vecs[:, order]))


def nearest_psd(R) -> np.ndarray:
    """Frobenius-nearest symmetric positive semi-definite matrix (Higham 1988).

    Symmetrize, eigendecompose, clamp negative eigenvalues at zero.
    """
    R = np.asarray(R, dtype=float)
    B = 0.5 * (R + R.T)
    if B.size == 0:
        return B
    vals, vecs = np.linalg.eigh(B)
    if vals[0] >= 0.0:
        return B
    out = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return 0.5 * (out + out.T)


def psd_pinv(R, rtol: float = 1e-10, atol: float = 0.0) -> tuple[np.ndarray, int]:
    """Spectral pseudo-inverse of a symmetric PSD matrix and its numerical rank."""
    R = np.asarray(R, dtype=float)
    if R.size == 0:
        return np.zeros_like(R), 0
    vals, vecs = np.linalg.eigh(0.5 * (R + R.T))
    cut = max(atol, rtol * max(float(vals[-1]), 0.0))
    keep = vals > cut
    if not keep.any():
        return np.zeros_like(R), 0
    V = vecs[:, keep]
    return (V / vals[keep]) @ V.T, int(keep.sum())


def column_space_projector(X, rtol: float = 1e-10, atol: float = 0.0) -> np.ndarray:
    """Orthogonal projector onto C(X), i.e. X (X'X)^+ X'.

    The pseudo-inverse drops directions of X'X with eigenvalue at or below
    ``max(atol, rtol * lambda_max)``, so rank-deficient X gives the projector
    onto its actual column space.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p == 0:
        return np.zeros((n, n))
    vals, vecs = np.linalg.eigh(X.T @ X)
    cut = max(atol, rtol * max(float(vals[-1]), 0.0))
    keep = vals > cut
    if not keep.any():
        return np.zeros((n, n))
    # Orthonormal basis of C(X): U = X V Lambda^{-1/2}
    U = X @ (vecs[:, keep] / np.sqrt(vals[keep]))
    P = U @ U.T
    return 0.5 * (P + P.T)


def matrix_rank(X, rtol: float = 1e-10) -> int:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] == 0 or X.shape[0] == 0:
        return 0
    vals = np.linalg.eigvalsh(X.T @ X)
    return int((vals > rtol * max(float(vals[-1]), 0.0)).sum())


def psd_sqrt_factor(C) -> np.ndarray:
    """Factor L with L L' = C for a symmetric PSD C; negative round-off is clamped."""
    C = np.asarray(C, dtype=float)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))
