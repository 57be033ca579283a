"""MI propagator matrices for the latent VAR(1)."""
from __future__ import annotations

import numpy as np

from .linalg import column_space_projector, sym_eig_sorted

MODES = ("reduced", "paper_literal")


class PropagatorDegeneracyError(ValueError):
    pass


def build_B(S, X) -> np.ndarray:
    """``B_t = (S'X_t, I_r)``, an ``r x (p + r)`` matrix."""
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    r = S.shape[1]
    return np.hstack([S.T @ X, np.eye(r)])


def mi_propagator(B, mode: str = "reduced", atol: float = 1e-8) -> np.ndarray:
    """Propagator ``M`` (r x r, orthogonal) from ``B_t``.

    ``reduced`` deconfounds against the left block ``C = S'X``: the columns of
    ``M`` are the eigenvectors of ``I_r - P_C``, so the leading ``r - rank(C)``
    columns are orthogonal to C(C). Singular values of ``C`` at or below
    ``atol`` count as zero; with an MI basis ``C`` vanishes and ``M = I_r``.

    ``paper_literal`` uses ``G(B, I_r)`` itself, which is identically zero
    because ``B`` contains an identity block; it always raises.
    """
    if mode not in MODES:
        raise ValueError(f"propagator mode must be one of {MODES}, got {mode!r}")
    B = np.asarray(B, dtype=float)
    r = B.shape[0]
    if mode == "paper_literal":
        R = np.eye(r) - column_space_projector(B)
        G = R @ np.eye(r) @ R
        if np.linalg.norm(G) <= 1e-8:
            raise PropagatorDegeneracyError(
                "G(B_t, I_r) is identically zero; column space of B_t spans R^r"
            )
        return sym_eig_sorted(G).vectors
    C = B[:, : B.shape[1] - r]
    if C.size == 0 or matrix_rank_abs(C, atol) == 0:
        return np.eye(r)
    P = column_space_projector(C, atol=atol**2)
    return sym_eig_sorted(np.eye(r) - P).vectors


def matrix_rank_abs(C, atol: float) -> int:
    s = np.linalg.svd(np.asarray(C, dtype=float), compute_uv=False)
    if s.size == 0:
        return 0
    return int((s > max(atol, 1e-10 * s[0])).sum())

