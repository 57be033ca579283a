"""Independent reference computations used by the tests."""
from __future__ import annotations

import numpy as np


def random_spd(r: int, rng, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((r, r))
    return scale * (A @ A.T + r * np.eye(r) * 0.5)


def random_orthogonal(r: int, rng) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((r, r)))
    return Q * np.sign(np.diag(R))


def random_state_space(rng, T: int, r: int, n_max: int):
    """Random linear-Gaussian state space with possibly empty time points."""
    n = [int(rng.integers(0, n_max + 1)) for _ in range(T)]
    n[0] = max(n[0], 1)
    S = [rng.standard_normal((k, r)) for k in n]
    V = [rng.uniform(0.3, 2.0, size=k) for k in n]
    M = [None] + [0.9 * random_orthogonal(r, rng) if rng.random() < 0.5 else rng.standard_normal((r, r)) * 0.5
                  for _ in range(T - 1)]
    W = [None] + [random_spd(r, rng, 0.3) for _ in range(T - 1)]
    K1 = random_spd(r, rng)
    z = [rng.standard_normal(k) * 2 for k in n]
    return z, S, V, M, W, K1


def state_prior_covariance(M, W, K1, T: int) -> np.ndarray:
    """Covariance of stacked ``(eta_1, ..., eta_T)`` under the VAR(1) prior."""
    r = K1.shape[0]
    Sigma = np.zeros((T * r, T * r))
    covs = [np.asarray(K1, dtype=float)]
    for t in range(1, T):
        covs.append(M[t] @ covs[-1] @ M[t].T + W[t])
    # cov(eta_s, eta_t) for s <= t is Phi(t, s) cov(eta_s)
    for s in range(T):
        Phi = np.eye(r)
        for t in range(s, T):
            if t > s:
                Phi = M[t] @ Phi
            block = Phi @ covs[s]
            Sigma[t * r:(t + 1) * r, s * r:(s + 1) * r] = block
            Sigma[s * r:(s + 1) * r, t * r:(t + 1) * r] = block.T
    return Sigma


def condition_on(Sigma_eta, S, V, z, upto: int, r: int):
    """Posterior mean and covariance of stacked eta given ``z_1..z_upto`` by dense conditioning."""
    T = len(S)
    rows = []
    for t in range(upto):
        H = np.zeros((len(z[t]), T * r))
        H[:, t * r:(t + 1) * r] = S[t]
        rows.append(H)
    if not rows or sum(len(z[t]) for t in range(upto)) == 0:
        return np.zeros(T * r), Sigma_eta
    H = np.vstack(rows)
    R = np.diag(np.concatenate([V[t] for t in range(upto)]))
    zz = np.concatenate([z[t] for t in range(upto)])
    C = H @ Sigma_eta @ H.T + R
    G = np.linalg.solve(C, H @ Sigma_eta).T
    mean = G @ zz
    cov = Sigma_eta - G @ H @ Sigma_eta
    return mean, 0.5 * (cov + cov.T)


def dense_filter_smoother(z, S, V, M, W, K1):
    """Filtered ``E(eta_t | z_1:t)`` and smoothed ``E(eta_t | z_1:T)`` moments by brute force."""
    T, r = len(z), K1.shape[0]
    Sigma = state_prior_covariance(M, W, K1, T)
    fm = np.zeros((T, r))
    fc = np.zeros((T, r, r))
    for t in range(T):
        mean, cov = condition_on(Sigma, S, V, z, t + 1, r)
        fm[t] = mean[t * r:(t + 1) * r]
        fc[t] = cov[t * r:(t + 1) * r, t * r:(t + 1) * r]
    mean, cov = condition_on(Sigma, S, V, z, T, r)
    return fm, fc, mean.reshape(T, r), cov


def frobenius_objective(P, S, C) -> float:
    return float(np.linalg.norm(P - S @ np.linalg.inv(C) @ S.T))


def random_restart_min(P, S, rng, restarts: int = 200) -> float:
    """Best Frobenius objective over random Cholesky-parameterized PD matrices ``C``.

    Each restart is polished with a Nelder-Mead search over the Cholesky factor.
    """
    from scipy.optimize import minimize

    r = S.shape[1]
    tril = np.tril_indices(r)

    def unpack(theta):
        L = np.zeros((r, r))
        L[tril] = theta
        d = np.diag_indices(r)
        L[d] = np.exp(np.clip(L[d], -30, 30))
        return L @ L.T

    def objective(theta):
        try:
            value = frobenius_objective(P, S, unpack(theta))
        except np.linalg.LinAlgError:
            return np.inf
        return value if np.isfinite(value) else np.inf

    starts = [rng.standard_normal(len(tril[0])) * 2 for _ in range(restarts)]
    values = np.array([objective(s) for s in starts])
    best = float(values.min())
    for k in np.argsort(values)[:5]:
        res = minimize(objective, starts[k], method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-12})
        best = min(best, float(res.fun))
    return best
