"""Simulate -> perturb -> mask -> fit -> score replicate studies."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import BasisCache
from .diagnostics import mprd, stspe, summarize_chains
from .graph import AdjacencyGraph, MultivariateSupport, lattice_graph
from .model import (
    CovariateSpec,
    McmcConfig,
    ModelConfig,
    ObservationTable,
    Structure,
    bind,
    build_structure,
    fit,
    predict,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerativeConfig:
    """Parameters of the synthetic truth ``Z = x'beta + S'eta + xi + eps``.

    ``field_variance`` (when set) fixes sigma_K^2 so that the average marginal
    variance of ``S'eta`` at time 1 equals it; otherwise ``sigma_k2`` is used.
    """

    beta: tuple = (7.0, 0.2)
    field_variance: float | None = 0.02
    sigma_k2: float = 1.0
    sigma_xi2: float = 0.03
    measurement_variance: float = 0.5


@dataclass
class LatentRecord:
    """Per-t component arrays over all prediction cells."""

    mu: list
    s_eta: list
    xi: list
    eps: list
    eta: np.ndarray
    sigma_k2: float

    def to_csv(self, support: MultivariateSupport) -> str:
        lines = ["variable,time,unit,mu,basis_effect,fine_scale,noise,y"]
        for t, time in enumerate(support.times):
            for k, (v, u) in enumerate(support.prediction_cells[t]):
                y = self.mu[t][k] + self.s_eta[t][k] + self.xi[t][k]
                vals = (self.mu[t][k], self.s_eta[t][k], self.xi[t][k], self.eps[t][k], y)
                lines.append(f"{support.variables[v]},{time},{support.unit_ids[u]}," +
                             ",".join(repr(float(x)) for x in vals))
        return "\n".join(lines) + "\n"


def _field_scale(structure: Structure, target: float) -> float:
    S, K = structure.bases[0].S, structure.K_star[0]
    unit = float(np.einsum("ij,jk,ik->", S, K, S)) / S.shape[0]
    return target / unit if unit > 0 else 0.0


def simulate(structure: Structure, gen: GenerativeConfig, rng: np.random.Generator
             ) -> tuple[ObservationTable, LatentRecord]:
    """Draw a full-support dataset from the model with the structure's bases and prior shapes."""
    sup = structure.support
    T, r = sup.T, structure.r
    beta = np.asarray(gen.beta, dtype=float)
    p = structure.X[0].shape[1]
    if beta.shape != (p,):
        raise ValueError(f"generator beta has {beta.size} entries, design has {p} columns")
    sk2 = _field_scale(structure, gen.field_variance) if gen.field_variance is not None else gen.sigma_k2
    eta = np.zeros((T, r))
    for t in range(T):
        if t == 0:
            cov = sk2 * structure.K_star[0]
            mean = np.zeros(r)
        else:
            cov = sk2 * structure.W_star[t]
            mean = structure.M[t] @ eta[t - 1]
        eta[t] = mean + _psd_draw(cov, rng)
    mu, s_eta, xi, eps = [], [], [], []
    var, tim, uni, val = [], [], [], []
    for t in range(T):
        N = sup.N(t)
        mu.append(structure.X[t] @ beta)
        s_eta.append(structure.bases[t].S @ eta[t])
        xi.append(math.sqrt(gen.sigma_xi2) * rng.standard_normal(N))
        eps.append(math.sqrt(gen.measurement_variance) * rng.standard_normal(N))
        z = mu[t] + s_eta[t] + xi[t] + eps[t]
        for k, (v, u) in enumerate(sup.prediction_cells[t]):
            var.append(sup.variables[v])
            tim.append(sup.times[t])
            uni.append(sup.unit_ids[u])
            val.append(z[k])
    n = len(val)
    variance = np.full(n, gen.measurement_variance) if gen.measurement_variance > 0 else np.full(n, np.nan)
    table = ObservationTable(var, tim, uni, np.array(val), variance)
    return table, LatentRecord(mu, s_eta, xi, eps, eta, sk2)


def _psd_draw(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs @ (np.sqrt(np.clip(vals, 0.0, None)) * rng.standard_normal(len(vals)))


def perturb(table: ObservationTable, sigma_eps2, rng: np.random.Generator,
            inflate_variance: bool = True) -> tuple[ObservationTable, float]:
    """Add i.i.d. ``N(0, sigma_eps2)`` noise to every value.

    ``sigma_eps2="auto"`` uses the sample variance of the values (signal-to-noise
    ratio one). With ``inflate_variance`` the variance column grows by
    ``sigma_eps2`` so the fit knows about the added noise.
    """
    if sigma_eps2 == "auto":
        sigma_eps2 = float(np.var(table.value, ddof=1))
    sigma_eps2 = float(sigma_eps2)
    if sigma_eps2 < 0:
        raise ValueError("sigma_eps2 must be nonnegative")
    noise = math.sqrt(sigma_eps2) * rng.standard_normal(len(table))
    variance = table.variance + sigma_eps2 if inflate_variance else table.variance.copy()
    return table.replace(value=table.value + noise, variance=variance), sigma_eps2


def mask_observed(support: MultivariateSupport, fraction: float, rng: np.random.Generator) -> MultivariateSupport:
    """Per (variable, time), mark a uniform random ``round(fraction * N)`` subset observed."""
    if not 0 < fraction <= 1:
        raise ValueError("observed fraction must lie in (0, 1]")
    masks = []
    for t in range(support.T):
        cells = support.prediction_cells[t]
        mask = np.zeros(len(cells), dtype=bool)
        for v in range(support.L):
            rows = np.flatnonzero(cells[:, 0] == v)
            k = int(math.floor(fraction * len(rows) + 0.5))
            mask[rng.choice(rows, size=k, replace=False)] = True
        masks.append(mask)
    return support.with_observed(masks)


def observed_subset(table: ObservationTable, support: MultivariateSupport) -> ObservationTable:
    keep = set()
    for t in range(support.T):
        for v, u in support.prediction_cells[t][support.observed[t]]:
            keep.add((support.variables[v], support.times[t], support.unit_ids[u]))
    return table.subset([k in keep for k in table.keys()])


# ---------------------------------------------------------------- study driver


@dataclass(frozen=True)
class StudyConfig:
    replicates: int = 20
    observed_fraction: float = 0.65
    sigma_eps2: object = "auto"
    nrow: int = 10
    ncol: int = 10
    n_variables: int = 2
    n_times: int = 20
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        r=30, covariates=CovariateSpec(terms=("variable",))))
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(iterations=2000, burn_in=200, chains=1))
    generator: GenerativeConfig = field(default_factory=GenerativeConfig)
    inflate_variance: bool = True
    seed: int = 0

    def validate(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not 0 < self.observed_fraction <= 1:
            raise ValueError("observed_fraction must lie in (0, 1]")
        if self.sigma_eps2 != "auto" and float(self.sigma_eps2) < 0:
            raise ValueError("sigma_eps2 must be nonnegative or 'auto'")


@dataclass
class ReplicateData:
    """All inputs of one replicate, kept for diagnostics and inspection."""

    truth: ObservationTable
    latent: LatentRecord
    perturbed: ObservationTable
    support: MultivariateSupport
    sigma_eps2: float
    fit_seed: int


def study_structure(cfg: StudyConfig, graph: AdjacencyGraph | None = None) -> Structure:
    graph = graph if graph is not None else lattice_graph(cfg.nrow, cfg.ncol)
    support = MultivariateSupport.full(cfg.n_variables, cfg.n_times, graph.ids)
    return build_structure(support, graph, cfg.model, cache=BasisCache())


def replicate_data(cfg: StudyConfig, structure: Structure, rep: int) -> ReplicateData:
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(rep,))
    sim_ss, pert_ss, mask_ss, fit_ss = ss.spawn(4)
    truth, latent = simulate(structure, cfg.generator, np.random.default_rng(sim_ss))
    perturbed, s2 = perturb(truth, cfg.sigma_eps2, np.random.default_rng(pert_ss), cfg.inflate_variance)
    support = mask_observed(structure.support, cfg.observed_fraction, np.random.default_rng(mask_ss))
    return ReplicateData(truth, latent, perturbed, support, s2, int(fit_ss.generate_state(1)[0]))


def replicate_model(structure: Structure, data: ReplicateData):
    return bind(structure, data.support, observed_subset(data.perturbed, data.support))


def score(pred, truth: ObservationTable, support: MultivariateSupport, sigma_eps2: float) -> dict:
    lookup = dict(zip(truth.keys(), truth.value))
    est = {"observed": [], "missing": []}
    ref = {"observed": [], "missing": []}
    for t in range(support.T):
        for k, (v, u) in enumerate(support.prediction_cells[t]):
            key = (support.variables[v], support.times[t], support.unit_ids[u])
            part = "observed" if support.observed[t][k] else "missing"
            est[part].append(pred.post_mean[t][k])
            ref[part].append(lookup[key])
    out = {}
    for part in ("observed", "missing"):
        if not est[part]:
            out[f"stspe_{part}"] = math.nan
            out[f"mprd_{part}"] = math.nan
            out[f"mprd_excluded_{part}"] = 0
            continue
        m = mprd(est[part], ref[part])
        out[f"stspe_{part}"] = stspe(est[part], ref[part], sigma_eps2) if sigma_eps2 > 0 else math.nan
        out[f"mprd_{part}"] = m.value
        out[f"mprd_excluded_{part}"] = m.excluded
    return out


METRICS = ("stspe_observed", "stspe_missing", "mprd_observed", "mprd_missing")


def run_study(cfg: StudyConfig, graph: AdjacencyGraph | None = None, progress=None) -> dict:
    """Run all replicates; failures are recorded and the study continues."""
    cfg.validate()
    structure = study_structure(cfg, graph)
    rows = []
    for rep in range(cfg.replicates):
        row = {"replicate": rep + 1}
        try:
            data = replicate_data(cfg, structure, rep)
            model = replicate_model(structure, data)
            mc = McmcConfig(cfg.mcmc.iterations, cfg.mcmc.burn_in, cfg.mcmc.chains, data.fit_seed)
            draws = fit(model, mc)
            pred = predict(draws, model)
            row.update(status="ok", seed=data.fit_seed, sigma_eps2=data.sigma_eps2)
            row.update(score(pred, data.truth, data.support, data.sigma_eps2))
        except Exception as exc:  # recorded per replicate
            log.exception("replicate %d failed", rep + 1)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
        if progress is not None:
            progress(rep, row)
    return {"config": config_to_dict(cfg), "replicates": rows, "summary": summarize_rows(rows),
            "failures": sum(r["status"] != "ok" for r in rows), "r": structure.r}


def summarize_rows(rows) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    out = {}
    for name in METRICS:
        vals = np.array([r[name] for r in ok], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            out[name] = {"median": float(med), "iqr": float(q3 - q1)}
        else:
            out[name] = {"median": None, "iqr": None}
    return out


def rows_to_csv(rows) -> str:
    cols = ["replicate", "status", "seed", "sigma_eps2", *METRICS, "mprd_excluded_observed", "mprd_excluded_missing"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("" if r.get(c) is None else
                              (repr(float(r[c])) if isinstance(r.get(c), float) else str(r[c])) for c in cols))
    return "\n".join(lines) + "\n"


def convergence_report(cfg: StudyConfig, chains: int = 3, iterations: int = 5000, burn_in: int = 500,
                       replicate: int = 0) -> dict:
    """Multi-chain diagnostics on one study replicate."""
    structure = study_structure(cfg)
    data = replicate_data(cfg, structure, replicate)
    model = replicate_model(structure, data)
    draws = fit(model, McmcConfig(iterations, burn_in, chains, data.fit_seed))
    return summarize_chains(draws)


def config_to_dict(cfg) -> dict:
    """JSON-ready view of a (nested) dataclass config."""
    return json.loads(json.dumps(asdict(cfg), default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    return str(obj)
