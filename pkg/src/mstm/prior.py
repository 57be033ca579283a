"""MI prior shapes: ``K*_t`` from a target precision and innovation shapes ``W*_t``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import nearest_psd

EIGEN_FLOOR = 1e-8
LIFT_TOL = 1e-10


@dataclass
class PriorShapes:
    K_star: list
    W_star: list  # W_star[0] is None; W_star[t] is the innovation shape into t
    lifted_flags: list
    floored: list = field(default_factory=list)  # eigenvalues raised per t


def k_star_core(Ss, Ps) -> np.ndarray:
    """Best positive approximant of ``(1/K) sum_k S_k' P_k S_k``."""
    Ss, Ps = list(Ss), list(Ps)
    if not Ss or len(Ss) != len(Ps):
        raise ValueError("need one target per basis")
    acc = None
    for S, P in zip(Ss, Ps):
        S = np.asarray(S, dtype=float)
        P = np.asarray(P, dtype=float)
        if P.shape != (S.shape[0], S.shape[0]):
            raise ValueError(f"target precision {P.shape} does not match basis with {S.shape[0]} rows")
        term = S.T @ P @ S
        acc = term if acc is None else acc + term
    return nearest_psd(acc / len(Ss))


def _floored_inverse(core: np.ndarray, floor: float) -> tuple[np.ndarray, int]:
    vals, vecs = np.linalg.eigh(core)
    lam_max = float(vals[-1])
    cut = floor * lam_max if lam_max > 0 else floor
    n_floored = int((vals < cut).sum())
    vals = np.maximum(vals, cut)
    K = (vecs / vals) @ vecs.T
    return 0.5 * (K + K.T), n_floored


def k_star_multi(Ss, Ps, floor: float = EIGEN_FLOOR) -> tuple[np.ndarray, int]:
    """Minimizer of ``sum_k ||P_k - S_k C^{-1} S_k'||_F`` and the number of floored eigenvalues.

    Eigenvalues of the PSD core below ``floor * lambda_max`` (or below ``floor``
    when ``lambda_max <= 0``) are raised to that level before inversion.
    """
    return _floored_inverse(k_star_core(Ss, Ps), floor)


def k_star(S, P, floor: float = EIGEN_FLOOR) -> np.ndarray:
    return k_star_multi([S], [P], floor)[0]


def k_star_covariance_form(S, P) -> np.ndarray:
    """Minimizer of ``||P - S C S'||_F`` over PSD ``C``."""
    return k_star_core([S], [P])


def w_star(K_t, K_prev, M, tol: float = LIFT_TOL) -> tuple[np.ndarray, bool]:
    """``K*_t - M K*_{t-1} M'``, replaced by its nearest PSD matrix when indefinite.

    Returns the shape and whether lifting was applied.
    """
    K_t = np.asarray(K_t, dtype=float)
    raw = K_t - M @ np.asarray(K_prev, dtype=float) @ M.T
    raw = 0.5 * (raw + raw.T)
    vals = np.linalg.eigvalsh(raw)
    scale = float(np.max(np.abs(vals))) if vals.size else 0.0
    if vals.size and vals[0] < -tol * scale:
        return nearest_psd(raw), True
    return raw, False
