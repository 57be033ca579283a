"""Moran's I operator and the multivariate spatio-temporal MI basis."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import column_space_projector, matrix_rank, sym_eig_sorted

log = logging.getLogger(__name__)


class BasisRankError(ValueError):
    pass


@dataclass(frozen=True)
class MiBasis:
    """Leading eigenvectors ``S`` of the MI operator over the full prediction support.

    ``cells`` (optional) holds the ``(variable, unit)`` row labels of ``S``.
    """

    S: np.ndarray
    eigenvalues: np.ndarray
    cells: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.S.shape[1]


def mi_operator(X, A) -> np.ndarray:
    """``G(X, A) = (I - P_X) A (I - P_X)``."""
    A = np.asarray(A, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    if X.shape[0] != A.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but A is {A.shape[0]}x{A.shape[1]}")
    R = np.eye(A.shape[0]) - column_space_projector(X)
    G = R @ A @ R
    return 0.5 * (G + G.T)


def _complement_basis(X: np.ndarray, N: int) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of C(X)."""
    if X.shape[1] == 0:
        return np.eye(N)
    vals, vecs = np.linalg.eigh(np.eye(N) - column_space_projector(X))
    return vecs[:, vals > 0.5]


def max_rank(X, N: int) -> int:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return N - matrix_rank(X)


def mi_basis(X, A, r: int, cells=None) -> MiBasis:
    """First ``r`` eigenvectors of ``G(X, A)`` by descending eigenvalue.

    The eigenproblem is solved on the complement of C(X), which is where ``G``
    acts; the zero eigenvalues ``G`` carries on C(X) itself can never enter the
    basis, so ``S'X = 0`` holds even when the graph has a large null space.
    """
    A = np.asarray(A, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = A.shape[0]
    if X.shape[0] != N:
        raise ValueError(f"X has {X.shape[0]} rows but A is {N}x{N}")
    bound = max_rank(X, N)
    if not 1 <= r <= bound:
        raise BasisRankError(f"r={r} is infeasible: need 1 <= r <= N_t - rank(X_t) = {bound}")
    U = _complement_basis(X, N)
    eig = sym_eig_sorted(0.5 * (U.T @ A @ U + (U.T @ A @ U).T))
    S = U @ eig.vectors[:, :r]
    # canonical column signs on the final basis
    idx = np.argmax(np.abs(S), axis=0)
    S = S * np.sign(S[idx, np.arange(r)])
    return MiBasis(S, eig.values[:r].copy(), None if cells is None else np.asarray(cells))


def basis_rows_for(basis: MiBasis, cells) -> np.ndarray:
    """Rows of ``S`` for the requested ``(variable, unit)`` cells, in request order."""
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    if len(cells) == 0:
        return np.zeros((0, basis.r))
    if basis.cells is None:
        raise ValueError("basis was built without cell labels")
    lookup = {(int(v), int(u)): k for k, (v, u) in enumerate(basis.cells)}
    try:
        rows = [lookup[(int(v), int(u))] for v, u in cells]
    except KeyError as exc:
        raise KeyError(f"cell {exc.args[0]} is not in the prediction support") from None
    return basis.S[rows]


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class BasisCache:
    """Memoizes MI bases on ``(X digest, A digest, r)``."""

    store: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def get(self, X, A, r: int, cells=None) -> MiBasis:
        key = (array_digest(X), array_digest(A), r)
        basis = self.store.get(key)
        if basis is None:
            self.misses += 1
            basis = mi_basis(X, A, r, cells)
            self.store[key] = basis
        else:
            self.hits += 1
        return basis


def format_basis_csv(bases, times=None) -> str:
    """Long-format dump with columns ``time,cell_index,component,value``."""
    out = ["time,cell_index,component,value"]
    for t, basis in enumerate(bases):
        label = times[t] if times is not None else t + 1
        N, r = basis.S.shape
        for i in range(N):
            for k in range(r):
                out.append(f"{label},{i},{k + 1},{basis.S[i, k]!r}")
    return "\n".join(out) + "\n"
