"""Convergence diagnostics and prediction-quality metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MprdResult:
    value: float
    excluded: int  # cells with zero truth


def mprd(predictions, truth) -> MprdResult:
    """Median over cells of ``|(pred - truth) / truth| * 100``; zero-truth cells are dropped."""
    pred = np.asarray(predictions, dtype=float).ravel()
    z = np.asarray(truth, dtype=float).ravel()
    if pred.shape != z.shape:
        raise ValueError("predictions and truth differ in length")
    keep = z != 0
    excluded = int((~keep).sum())
    if excluded:
        log.warning("mprd: excluded %d cells with zero truth", excluded)
    if not keep.any():
        return MprdResult(float("nan"), excluded)
    return MprdResult(float(np.median(np.abs((pred[keep] - z[keep]) / z[keep])) * 100.0), excluded)


def stspe(predictions, truth, sigma_eps2: float) -> float:
    """Mean squared prediction error divided by the perturbation variance."""
    if not sigma_eps2 > 0:
        raise ValueError("sigma_eps2 must be positive")
    err = np.asarray(predictions, dtype=float).ravel() - np.asarray(truth, dtype=float).ravel()
    return float(np.mean(err * err) / sigma_eps2)


@dataclass(frozen=True)
class RhatResult:
    value: float
    degenerate: bool = False


def gelman_rubin(chains) -> RhatResult:
    """Potential scale reduction factor from ``m`` chains of equal length ``n``.

    Zero within-chain variance gives 1 when the chains also agree and
    ``inf`` when they do not; both cases are flagged as degenerate.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise ValueError("need at least 2 chains of length >= 10")
    m, n = x.shape
    means = x.mean(axis=1)
    W = float(x.var(axis=1, ddof=1).mean())
    B = float(n * means.var(ddof=1))
    if W <= 0:
        return RhatResult(1.0 if B <= 0 else float("inf"), True)
    var_plus = (n - 1) / n * W + B / n
    return RhatResult(float(np.sqrt(var_plus / W)))


def batch_means_se(series, batch_size: int = 50) -> float:
    """Monte Carlo standard error of the mean from non-overlapping batch means."""
    x = np.asarray(series, dtype=float).ravel()
    if len(x) < 2 * batch_size:
        raise ValueError(f"series of length {len(x)} is shorter than 2 * batch_size = {2 * batch_size}")
    k = len(x) // batch_size
    bm = x[: k * batch_size].reshape(k, batch_size).mean(axis=1)
    return float(np.sqrt(bm.var(ddof=1) / k))


def summarize_chains(draws, batch_size: int = 50) -> dict:
    """R-hat and batch-means SE for every scalar series across chains.

    The SE is that of the pooled mean (per-chain batch-means variances
    averaged over independent chains) and sits next to the pooled posterior SD.
    """
    draws = list(draws)
    names = list(draws[0].scalar_series())
    out = {}
    for name in names:
        stack = np.array([d.scalar_series()[name] for d in draws])
        entry = {"posterior_sd": float(stack.std(ddof=1))}
        if len(draws) >= 2 and stack.shape[1] >= 10:
            rh = gelman_rubin(stack)
            entry["rhat"] = rh.value
            entry["rhat_degenerate"] = rh.degenerate
        if stack.shape[1] >= 2 * batch_size:
            se = np.sqrt(np.mean([batch_means_se(s, batch_size) ** 2 for s in stack]) / len(draws))
            entry["batch_means_se"] = float(se)
        out[name] = entry
    return out
