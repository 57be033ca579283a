"""Gibbs sampler: FFBS for the latent VAR(1) coefficients plus conjugate updates.

Indexing is 0-based in time. ``M[t]`` and ``W[t]`` describe the transition
*into* time ``t`` (``M[0]``/``W[0]`` are unused), so the smoother gain at ``t``
uses ``M[t + 1]``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .linalg import psd_pinv, psd_sqrt_factor

log = logging.getLogger(__name__)

BETA_MODES = ("shared", "per_time")
VARIANCE_MODES = ("known", "reweighted", "constant")


class KalmanError(FloatingPointError):
    def __init__(self, t: int, message: str):
        self.t = t
        super().__init__(f"time index {t}: {message}")


class GibbsError(RuntimeError):
    def __init__(self, iteration: int, conditional: str, cause: Exception):
        self.iteration = iteration
        self.conditional = conditional
        super().__init__(f"iteration {iteration}, {conditional} conditional: {cause}")


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings; defaults are the vague choices IG(2, 1) and sigma_beta^2 = 1e15."""

    sigma_beta2: float = 1e15
    mu_beta: tuple | None = None
    alpha_xi: float = 2.0
    beta_xi: float = 1.0
    alpha_k: float = 2.0
    beta_k: float = 1.0
    alpha_v: float = 2.0
    beta_v: float = 1.0


@dataclass
class KalmanMoments:
    filtered_mean: np.ndarray  # (T, r)
    filtered_cov: np.ndarray  # (T, r, r)
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray


@dataclass
class StateSpaceData:
    """Numeric inputs of the sampler, already restricted to observed cells.

    ``v_base`` holds per-observation variances: the measurement variances
    themselves in ``known``/``constant`` mode, the base variances scaled by
    ``delta[group]`` in ``reweighted`` mode.
    """

    S: list  # (n_t, r) per t
    X: list  # (n_t, p) per t
    z: list  # (n_t,) per t
    v_base: list
    group: list  # int arrays, per observation
    M: list  # r x r; M[0] unused
    K1_star: np.ndarray
    W_star: list  # W_star[0] unused
    variance_mode: str = "known"
    beta_mode: str = "shared"
    n_groups: int = 1
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    @property
    def T(self) -> int:
        return len(self.z)

    @property
    def r(self) -> int:
        return self.K1_star.shape[0]

    @property
    def p(self) -> int:
        return self.X[0].shape[1] if self.X else 0

    @property
    def n(self) -> np.ndarray:
        return np.array([len(z) for z in self.z], dtype=int)


@dataclass
class PosteriorDraws:
    eta: np.ndarray  # (R, T, r)
    xi: list  # per t, (R, n_t)
    beta: np.ndarray  # (R, p) shared or (R, T, p) per_time
    sigma_k2: np.ndarray  # (R,)
    sigma_xi2: np.ndarray  # (R, T)
    delta: np.ndarray | None  # (R, groups) when reweighted
    iterations: int
    burn_in: int
    seed: int
    chain: int
    metadata: dict = field(default_factory=dict)

    @property
    def retained(self) -> int:
        return len(self.sigma_k2)

    def beta_at(self, t: int) -> np.ndarray:
        return self.beta if self.beta.ndim == 2 else self.beta[:, t, :]

    def scalar_series(self) -> dict:
        """Named scalar traces: sigma_k2, sigma_xi2[t], beta[j] (and delta[g])."""
        out = {"sigma_k2": self.sigma_k2}
        for t in range(self.sigma_xi2.shape[1]):
            out[f"sigma_xi2[{t + 1}]"] = self.sigma_xi2[:, t]
        if self.beta.ndim == 2:
            for j in range(self.beta.shape[1]):
                out[f"beta[{j + 1}]"] = self.beta[:, j]
        else:
            for t in range(self.beta.shape[1]):
                for j in range(self.beta.shape[2]):
                    out[f"beta[{t + 1}][{j + 1}]"] = self.beta[:, t, j]
        if self.delta is not None:
            for g in range(self.delta.shape[1]):
                out[f"delta[{g + 1}]"] = self.delta[:, g]
        return out


def chain_rng(seed: int, chain: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain, stream)))


def _mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = psd_sqrt_factor(0.5 * (cov + cov.T))
    return mean + L @ rng.standard_normal(len(mean))


def _inv_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    return scale / rng.gamma(shape)


# ---------------------------------------------------------------- FFBS


def kalman_filter(z_tilde, S, V, M, W, K1) -> KalmanMoments:
    """Forward pass with ``N(0, K1)`` as the prior at the first time point.

    ``V[t]`` is the vector of measurement variances at ``t``. The measurement
    update is done in square-root information form, ``P_upd = L (I + L'HL)^{-1} L'``
    with ``P_pred = LL'`` and ``H = S'V^{-1}S``; this is algebraically the gain
    form but stays accurate when the prior is much wider than the data.
    Time points without observations skip the update.
    """
    T = len(z_tilde)
    r = np.asarray(K1).shape[0]
    fm = np.zeros((T, r))
    fc = np.zeros((T, r, r))
    pm = np.zeros((T, r))
    pc = np.zeros((T, r, r))
    m = np.zeros(r)
    P = np.asarray(K1, dtype=float)
    for t in range(T):
        if t > 0:
            m = M[t] @ m
            P = M[t] @ P @ M[t].T + W[t]
            P = 0.5 * (P + P.T)
        pm[t], pc[t] = m, P
        z = np.asarray(z_tilde[t], dtype=float)
        if len(z):
            v = np.asarray(V[t], dtype=float)
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise KalmanError(t, "measurement variances must be positive and finite")
            Sv = S[t].T / v
            H = Sv @ S[t]
            b = Sv @ z - H @ m
            m, P = _information_update(m, P, H, b, t)
        fm[t], fc[t] = m, P
    return KalmanMoments(fm, fc, pm, pc)


def _information_update(m, P, H, b, t):
    r = len(m)
    L = psd_sqrt_factor(P)
    inner = np.eye(r) + L.T @ H @ L
    try:
        c = cho_factor(inner, lower=True)
    except np.linalg.LinAlgError as exc:
        raise KalmanError(t, f"innovation covariance is not positive definite ({exc})") from None
    P_new = L @ cho_solve(c, L.T)
    P_new = 0.5 * (P_new + P_new.T)
    m_new = m + P_new @ b
    if not (np.all(np.isfinite(m_new)) and np.all(np.isfinite(P_new))):
        raise KalmanError(t, "non-finite filtered moments")
    return m_new, P_new


def _smoother_gain(P_filt, M_next, P_pred_next) -> np.ndarray:
    """``J = P_{t|t} M_{t+1}' P_{t+1|t}^{-1}``; pseudo-inverse when ``P_{t+1|t}`` is singular."""
    A = M_next @ P_filt  # J' = P_pred^{-1} A
    try:
        c = cho_factor(P_pred_next, lower=True)
        return cho_solve(c, A).T
    except np.linalg.LinAlgError:
        warnings.warn("singular predicted covariance in smoother; using pseudo-inverse", RuntimeWarning)
        pinv, _ = psd_pinv(P_pred_next)
        return (pinv @ A).T


def backward_sample(moments: KalmanMoments, M, rng: np.random.Generator) -> np.ndarray:
    """Draw ``eta_{1:T}`` from its joint conditional given the filtered moments."""
    fm, fc, pm, pc = moments.filtered_mean, moments.filtered_cov, moments.predicted_mean, moments.predicted_cov
    T, r = fm.shape
    eta = np.zeros((T, r))
    eta[-1] = _mvn(fm[-1], fc[-1], rng)
    for t in range(T - 2, -1, -1):
        J = _smoother_gain(fc[t], M[t + 1], pc[t + 1])
        mean = fm[t] + J @ (eta[t + 1] - pm[t + 1])
        cov = fc[t] - J @ pc[t + 1] @ J.T
        eta[t] = _mvn(mean, cov, rng)
    return eta


def rts_smoother(moments: KalmanMoments, M) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed means and covariances ``E(eta_t | all data)``, ``cov(eta_t | all data)``."""
    fm, fc, pm, pc = moments.filtered_mean, moments.filtered_cov, moments.predicted_mean, moments.predicted_cov
    T, r = fm.shape
    sm = fm.copy()
    sc = fc.copy()
    for t in range(T - 2, -1, -1):
        J = _smoother_gain(fc[t], M[t + 1], pc[t + 1])
        sm[t] = fm[t] + J @ (sm[t + 1] - pm[t + 1])
        C = fc[t] + J @ (sc[t + 1] - pc[t + 1]) @ J.T
        sc[t] = 0.5 * (C + C.T)
    return sm, sc


def ffbs(z_tilde, S, V, M, W, K1, rng) -> np.ndarray:
    return backward_sample(kalman_filter(z_tilde, S, V, M, W, K1), M, rng)


# ---------------------------------------------------------------- conditionals


def xi_conditional(z, xb, s_eta, v, sigma_xi2) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0) or sigma_xi2 < 0:
        raise ValueError("variances must be positive")
    if sigma_xi2 == 0:
        return np.zeros_like(v), np.zeros_like(v)
    var = 1.0 / (1.0 / v + 1.0 / sigma_xi2)
    mean = var * (np.asarray(z) - xb - s_eta) / v
    return mean, var


def sample_xi(z, xb, s_eta, v, sigma_xi2, rng) -> np.ndarray:
    mean, var = xi_conditional(z, xb, s_eta, v, sigma_xi2)
    return mean + np.sqrt(var) * rng.standard_normal(len(mean))


def beta_conditional(z, xi, s_eta, X, v, sigma_beta2, mu_beta=None, mode="shared"):
    """Posterior ``(mean, precision)`` of beta; per-time mode returns lists over t."""
    if mode not in BETA_MODES:
        raise ValueError(f"beta mode must be one of {BETA_MODES}")
    p = X[0].shape[1]
    mu = np.zeros(p) if mu_beta is None else np.asarray(mu_beta, dtype=float)
    prior_prec = np.eye(p) / sigma_beta2

    def info(t):
        Xv = X[t].T / v[t]
        return Xv @ X[t], Xv @ (z[t] - xi[t] - s_eta[t])

    if mode == "per_time":
        means, precs = [], []
        for t in range(len(z)):
            Q, b = info(t)
            Q = Q + prior_prec
            means.append(np.linalg.solve(Q, b + mu / sigma_beta2))
            precs.append(Q)
        return means, precs
    Q = prior_prec.copy()
    b = mu / sigma_beta2
    for t in range(len(z)):
        Qt, bt = info(t)
        Q += Qt
        b = b + bt
    return np.linalg.solve(Q, b), Q


def _draw_from_precision(mean, Q, rng):
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular beta information matrix ({exc})") from None
    return mean + solve_triangular(L.T, rng.standard_normal(len(mean)), lower=False)


def sample_beta(z, xi, s_eta, X, v, sigma_beta2, mu_beta=None, mode="shared", rng=None) -> np.ndarray:
    mean, Q = beta_conditional(z, xi, s_eta, X, v, sigma_beta2, mu_beta, mode)
    if mode == "per_time":
        return np.array([_draw_from_precision(m, q, rng) for m, q in zip(mean, Q)])
    return _draw_from_precision(mean, Q, rng)


def sigma_k_conditional(eta, K1_star, W_star, M, alpha=2.0, beta=1.0,
                        K1_inv=None, W_pinv=None, W_rank=None) -> tuple[float, float]:
    """Inverse-gamma ``(shape, scale)`` of sigma_K^2.

    Innovations enter through the pseudo-inverse of ``W*_t`` and contribute
    ``rank(W*_t)`` dimensions; with full-rank shapes this is
    ``IG(Tr/2 + alpha, beta + quadratic forms / 2)``.
    """
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    T, r = eta.shape
    if K1_inv is None:
        K1_inv = np.linalg.inv(K1_star)
    if W_pinv is None:
        W_pinv, W_rank = [None], [0]
        for t in range(1, T):
            Wi, k = psd_pinv(W_star[t])
            W_pinv.append(Wi)
            W_rank.append(k)
    q = float(eta[0] @ K1_inv @ eta[0])
    dims = r
    for t in range(1, T):
        d = eta[t] - M[t] @ eta[t - 1]
        q += float(d @ W_pinv[t] @ d)
        dims += W_rank[t]
    return alpha + dims / 2.0, beta + q / 2.0


def sample_sigma_k(eta, K1_star, W_star, M, rng, alpha=2.0, beta=1.0) -> float:
    return _inv_gamma(*sigma_k_conditional(eta, K1_star, W_star, M, alpha, beta), rng)


def sigma_xi_conditional(xi_t, alpha=2.0, beta=1.0) -> tuple[float, float]:
    xi_t = np.asarray(xi_t, dtype=float)
    return alpha + len(xi_t) / 2.0, beta + float(xi_t @ xi_t) / 2.0


def sample_sigma_xi(xi_t, rng, alpha=2.0, beta=1.0) -> float:
    return _inv_gamma(*sigma_xi_conditional(xi_t, alpha, beta), rng)


def delta_conditional(weighted_ss, counts, alpha=2.0, beta=1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per group: ``IG(count/2 + alpha, beta + sum(resid^2 / v_base) / 2)``."""
    weighted_ss = np.asarray(weighted_ss, dtype=float)
    counts = np.asarray(counts, dtype=float)
    return alpha + counts / 2.0, beta + weighted_ss / 2.0


def sample_delta(weighted_ss, counts, rng, alpha=2.0, beta=1.0) -> np.ndarray:
    shape, scale = delta_conditional(weighted_ss, counts, alpha, beta)
    return scale / rng.gamma(shape)


def delta_method_log_variance(v_raw, z):
    """Variance of ``log(Y)`` from the variance of ``Y`` at ``log(Y) = z``."""
    return np.asarray(v_raw, dtype=float) / np.exp(2.0 * np.asarray(z, dtype=float))


# ---------------------------------------------------------------- Gibbs driver


class _Precomputed:
    """Per-(t, group) cross products that do not change across iterations."""

    def __init__(self, data: StateSpaceData):
        self.T = data.T
        G = data.n_groups
        self.SvS = []  # [t][g] r x r
        self.Sv = []  # [t] r x n_t (scaled by 1/v_base)
        self.XvX = []
        self.Xv = []
        self.gmask = []
        for t in range(data.T):
            v = data.v_base[t]
            Sv = data.S[t].T / v if len(v) else np.zeros((data.r, 0))
            Xv = data.X[t].T / v if len(v) else np.zeros((data.p, 0))
            masks = [data.group[t] == g for g in range(G)]
            self.gmask.append(masks)
            self.Sv.append(Sv)
            self.Xv.append(Xv)
            self.SvS.append([Sv[:, m] @ data.S[t][m] for m in masks])
            self.XvX.append([Xv[:, m] @ data.X[t][m] for m in masks])
        self.K1_inv = np.linalg.inv(data.K1_star)
        self.W_pinv, self.W_rank = [None], [0]
        for t in range(1, data.T):
            Wi, k = psd_pinv(data.W_star[t])
            self.W_pinv.append(Wi)
            self.W_rank.append(k)
        self.counts = np.array([sum(int(masks[g].sum()) for masks in self.gmask) for g in range(G)])


def _initial_beta(data: StateSpaceData, pre: _Precomputed) -> np.ndarray:
    p = data.p
    Q = np.eye(p) / data.hyper.sigma_beta2
    b = np.zeros(p)
    for t in range(data.T):
        Q = Q + sum(pre.XvX[t])
        b = b + pre.Xv[t] @ data.z[t]
    beta, *_ = np.linalg.lstsq(Q, b, rcond=None)
    if data.beta_mode == "per_time":
        return np.tile(beta, (data.T, 1))
    return beta


def gibbs_chain(data: StateSpaceData, iterations: int = 10000, burn_in: int = 1000,
                seed: int = 0, chain: int = 0, progress=None) -> PosteriorDraws:
    """Run one chain. Iteration order: eta (FFBS), xi, beta, sigma_xi^2, sigma_K^2, delta."""
    if burn_in < 0 or iterations <= burn_in:
        raise ValueError("need 0 <= burn_in < iterations")
    if data.variance_mode not in VARIANCE_MODES:
        raise ValueError(f"variance mode must be one of {VARIANCE_MODES}")
    if data.beta_mode not in BETA_MODES:
        raise ValueError(f"beta mode must be one of {BETA_MODES}")
    rng = chain_rng(seed, chain)
    h = data.hyper
    T, r, p, G = data.T, data.r, data.p, data.n_groups
    n = data.n
    pre = _Precomputed(data)
    per_time = data.beta_mode == "per_time"
    reweighted = data.variance_mode == "reweighted"
    mu_beta = None if h.mu_beta is None else np.asarray(h.mu_beta, dtype=float)

    beta = _initial_beta(data, pre)
    eta = np.zeros((T, r))
    xi = [np.zeros(k) for k in n]
    sigma_k2 = 1.0
    sigma_xi2 = np.empty(T)
    for t in range(T):
        xb = data.X[t] @ (beta[t] if per_time else beta)
        resid = data.z[t] - xb
        base = float(resid @ resid) / max(len(resid), 1) if len(resid) else 1.0
        sigma_xi2[t] = max(base, 1e-6) * rng.uniform(0.5, 2.0)
    delta = np.ones(G)

    R = iterations - burn_in
    out_eta = np.empty((R, T, r))
    out_xi = [np.empty((R, k)) for k in n]
    out_beta = np.empty((R, T, p) if per_time else (R, p))
    out_sk = np.empty(R)
    out_sx = np.empty((R, T))
    out_delta = np.empty((R, G)) if reweighted else None

    for it in range(iterations):
        stage = "eta"
        try:
            inv_delta = 1.0 / delta
            # ---- eta via FFBS
            K1 = sigma_k2 * data.K1_star
            fm = np.zeros((T, r))
            fc = np.zeros((T, r, r))
            pm = np.zeros((T, r))
            pc = np.zeros((T, r, r))
            m = np.zeros(r)
            P = K1
            for t in range(T):
                if t > 0:
                    m = data.M[t] @ m
                    P = data.M[t] @ P @ data.M[t].T + sigma_k2 * data.W_star[t]
                    P = 0.5 * (P + P.T)
                pm[t], pc[t] = m, P
                if n[t]:
                    bt = beta[t] if per_time else beta
                    zt = data.z[t] - data.X[t] @ bt - xi[t]
                    if reweighted:
                        w = inv_delta[data.group[t]]
                        H = sum(inv_delta[g] * pre.SvS[t][g] for g in range(G))
                        b = (pre.Sv[t] * w) @ zt - H @ m
                    else:
                        H = pre.SvS[t][0] if G == 1 else sum(pre.SvS[t])
                        b = pre.Sv[t] @ zt - H @ m
                    m, P = _information_update(m, P, H, b, t)
                fm[t], fc[t] = m, P
            eta = backward_sample(KalmanMoments(fm, fc, pm, pc), data.M, rng)

            # ---- xi
            stage = "xi"
            s_eta = [data.S[t] @ eta[t] for t in range(T)]
            v = [data.v_base[t] * delta[data.group[t]] for t in range(T)]
            for t in range(T):
                if n[t]:
                    bt = beta[t] if per_time else beta
                    xi[t] = sample_xi(data.z[t], data.X[t] @ bt, s_eta[t], v[t], sigma_xi2[t], rng)

            # ---- beta
            stage = "beta"
            beta = _sample_beta_fast(data, pre, xi, s_eta, inv_delta, mu_beta, per_time, rng)

            # ---- variances
            stage = "sigma_xi2"
            for t in range(T):
                sigma_xi2[t] = sample_sigma_xi(xi[t], rng, h.alpha_xi, h.beta_xi)
            stage = "sigma_k2"
            shape, scale = sigma_k_conditional(
                eta, data.K1_star, data.W_star, data.M, h.alpha_k, h.beta_k,
                K1_inv=pre.K1_inv, W_pinv=pre.W_pinv, W_rank=pre.W_rank,
            )
            sigma_k2 = _inv_gamma(shape, scale, rng)
            if reweighted:
                stage = "delta"
                ss = np.zeros(G)
                for t in range(T):
                    if n[t]:
                        bt = beta[t] if per_time else beta
                        res = data.z[t] - data.X[t] @ bt - s_eta[t] - xi[t]
                        ss += np.bincount(data.group[t], weights=res**2 / data.v_base[t], minlength=G)
                delta = sample_delta(ss, pre.counts, rng, h.alpha_v, h.beta_v)
            if not (np.isfinite(sigma_k2) and np.all(np.isfinite(sigma_xi2)) and np.all(np.isfinite(beta))):
                raise FloatingPointError("non-finite draw")
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise GibbsError(it, stage, exc) from exc

        if it >= burn_in:
            k = it - burn_in
            out_eta[k] = eta
            for t in range(T):
                out_xi[t][k] = xi[t]
            out_beta[k] = beta
            out_sk[k] = sigma_k2
            out_sx[k] = sigma_xi2
            if reweighted:
                out_delta[k] = delta
        if progress is not None:
            progress(it)

    return PosteriorDraws(out_eta, out_xi, out_beta, out_sk, out_sx, out_delta,
                          iterations, burn_in, seed, chain)


def _sample_beta_fast(data, pre, xi, s_eta, inv_delta, mu_beta, per_time, rng):
    p, T, G = data.p, data.T, data.n_groups
    sb2 = data.hyper.sigma_beta2
    mu = np.zeros(p) if mu_beta is None else mu_beta
    prior_prec = np.eye(p) / sb2

    def info(t):
        if not data.n[t]:
            return np.zeros((p, p)), np.zeros(p)
        w = inv_delta[data.group[t]]
        Q = sum(inv_delta[g] * pre.XvX[t][g] for g in range(G))
        b = (pre.Xv[t] * w) @ (data.z[t] - xi[t] - s_eta[t])
        return Q, b

    if per_time:
        out = np.empty((T, p))
        for t in range(T):
            Q, b = info(t)
            Q = Q + prior_prec
            out[t] = _draw_from_precision(np.linalg.solve(Q, b + mu / sb2), Q, rng)
        return out
    Q = prior_prec.copy()
    b = mu / sb2
    for t in range(T):
        Qt, bt = info(t)
        Q = Q + Qt
        b = b + bt
    return _draw_from_precision(np.linalg.solve(Q, b), Q, rng)


def gibbs_run(data, iterations: int = 10000, burn_in: int = 1000, seed: int = 0,
              chains: int = 1) -> list[PosteriorDraws]:
    """Run ``chains`` chains; chain ``c`` uses the stream ``SeedSequence(seed, spawn_key=(c, 0))``."""
    data = getattr(data, "data", data)
    return [gibbs_chain(data, iterations, burn_in, seed, c) for c in range(chains)]
