"""Bind data, support, bases, propagators and priors into a fit; predict; contrasts."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .basis import BasisCache, array_digest, basis_rows_for, max_rank
from .graph import COUPLINGS, AdjacencyGraph, MultivariateSupport, _sorted_labels, block_adjacency, car_target_precision
from .linalg import matrix_rank
from .prior import EIGEN_FLOOR, k_star_multi, w_star
from .propagator import MODES as PROPAGATOR_MODES
from .propagator import build_B, mi_propagator
from .sampler import (
    BETA_MODES,
    VARIANCE_MODES,
    Hyperparameters,
    PosteriorDraws,
    StateSpaceData,
    chain_rng,
    gibbs_chain,
)

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------- tables


@dataclass
class ObservationTable:
    """Rows of ``(variable, time, unit, value, variance)``; missing variance is NaN."""

    variable: list
    time: list
    unit: list
    value: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.variable = [str(v) for v in self.variable]
        self.time = [str(s) for s in self.time]
        self.unit = [str(u) for u in self.unit]
        self.value = np.asarray(self.value, dtype=float)
        self.variance = np.asarray(self.variance, dtype=float)
        n = len(self.variable)
        if not (len(self.time) == len(self.unit) == len(self.value) == len(self.variance) == n):
            raise ModelError("observation columns have different lengths")
        bad = ~np.isnan(self.variance) & (self.variance <= 0)
        if bad.any():
            raise ModelError(f"variance must be positive where present (row {int(np.argmax(bad)) + 1})")
        keys = set(zip(self.variable, self.time, self.unit))
        if len(keys) != n:
            raise ModelError("duplicate (variable, time, unit) rows in observations")

    def __len__(self) -> int:
        return len(self.value)

    def keys(self) -> list:
        return list(zip(self.variable, self.time, self.unit))

    def subset(self, mask) -> "ObservationTable":
        mask = np.asarray(mask, dtype=bool)
        pick = np.flatnonzero(mask)
        return ObservationTable(
            [self.variable[i] for i in pick], [self.time[i] for i in pick], [self.unit[i] for i in pick],
            self.value[pick], self.variance[pick],
        )

    def replace(self, value=None, variance=None) -> "ObservationTable":
        return ObservationTable(
            list(self.variable), list(self.time), list(self.unit),
            self.value.copy() if value is None else value,
            self.variance.copy() if variance is None else variance,
        )

    @classmethod
    def parse_csv(cls, text: str) -> "ObservationTable":
        reader = csv.DictReader(io.StringIO(text))
        missing = {"variable", "time", "unit", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ModelError(f"observations are missing columns {sorted(missing)}")
        var, time, unit, value, variance = [], [], [], [], []
        for row in reader:
            var.append(row["variable"].strip())
            time.append(row["time"].strip())
            unit.append(row["unit"].strip())
            value.append(float(row["value"]))
            raw = (row.get("variance") or "").strip()
            variance.append(float(raw) if raw else math.nan)
        return cls(var, time, unit, np.array(value), np.array(variance))

    @classmethod
    def read_csv(cls, path) -> "ObservationTable":
        return cls.parse_csv(Path(path).read_text())

    def to_csv(self) -> str:
        lines = ["variable,time,unit,value,variance"]
        for v, s, u, z, w in zip(self.variable, self.time, self.unit, self.value, self.variance):
            lines.append(f"{v},{s},{u},{float(z)!r},{'' if math.isnan(w) else repr(float(w))}")
        return "\n".join(lines) + "\n"


@dataclass
class CovariateTable:
    """Named covariate columns keyed by ``(variable, time, unit)``."""

    columns: tuple
    values: dict

    @classmethod
    def parse_csv(cls, text: str) -> "CovariateTable":
        reader = csv.DictReader(io.StringIO(text))
        fields = list(reader.fieldnames or ())
        if fields[:3] != ["variable", "time", "unit"]:
            raise ModelError("covariates must start with columns variable,time,unit")
        cols = tuple(fields[3:])
        values = {}
        for row in reader:
            key = (row["variable"].strip(), row["time"].strip(), row["unit"].strip())
            values[key] = np.array([float(row[c]) for c in cols])
        return cls(cols, values)

    @classmethod
    def read_csv(cls, path) -> "CovariateTable":
        return cls.parse_csv(Path(path).read_text())


@dataclass(frozen=True)
class CovariateSpec:
    """Declarative design: intercept, treatment-coded factor terms, named columns.

    ``terms`` entries are factor names or ``"a:b"`` interactions. The factor
    ``variable`` is always available; other factors come from ``factors``, a
    map from variable label to ``{factor: level}``.
    """

    intercept: bool = True
    terms: tuple = ()
    columns: tuple = ()
    factors: Mapping = field(default_factory=dict)

    def _levels(self, support: MultivariateSupport, factor: str) -> tuple:
        if factor == "variable":
            return tuple(support.variables)
        try:
            return _sorted_labels(str(self.factors[v][factor]) for v in support.variables)
        except KeyError as exc:
            raise ModelError(f"factor {factor!r} is not defined for variable {exc.args[0]!r}") from None

    def _level_of(self, support, var_label: str, factor: str) -> str:
        if factor == "variable":
            return var_label
        return str(self.factors[var_label][factor])

    def column_names(self, support: MultivariateSupport) -> list:
        names = ["intercept"] if self.intercept else []
        for term in self.terms:
            parts = term.split(":")
            combos = [[]]
            for f in parts:
                combos = [c + [f"{f}={lv}"] for c in combos for lv in self._levels(support, f)[1:]]
            names += [":".join(c) for c in combos]
        return names + list(self.columns)

    def design(self, support: MultivariateSupport, t: int, table: CovariateTable | None = None) -> np.ndarray:
        cells = support.prediction_cells[t]
        var_labels = [support.variables[v] for v in cells[:, 0]]
        cols = []
        if self.intercept:
            cols.append(np.ones(len(cells)))
        for term in self.terms:
            parts = term.split(":")
            dummies = [[]]
            for f in parts:
                levels = self._levels(support, f)[1:]
                own = np.array([self._level_of(support, lab, f) for lab in var_labels], dtype=object)
                dummies = [d + [(own == lv).astype(float)] for d in dummies for lv in levels]
            for d in dummies:
                cols.append(np.prod(d, axis=0) if d else np.ones(len(cells)))
        if self.columns:
            if table is None:
                raise ModelError("covariate columns requested but no covariate table given")
            idx = [table.columns.index(c) for c in self.columns]
            time = support.times[t]
            rows = []
            for v, u in cells:
                key = (support.variables[v], time, support.unit_ids[u])
                if key not in table.values:
                    raise ModelError(f"no covariates for cell {key}")
                rows.append(table.values[key][idx])
            cols.extend(np.array(rows).T)
        if not cols:
            return np.zeros((len(cells), 0))
        return np.column_stack(cols)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ModelConfig:
    r: int = 30
    coupling: str = "same_unit"
    propagator_mode: str = "reduced"
    prior_target: object = "car"  # "car", "file:<path>", or a sequence of matrices per t
    beta_mode: str = "shared"
    variance_mode: str = "known"
    variance_value: float | None = None
    variance_groups: Mapping | None = None  # variable label -> 1-based group
    covariates: CovariateSpec = field(default_factory=CovariateSpec)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    eigen_floor: float = EIGEN_FLOOR

    def validate(self):
        if self.propagator_mode not in PROPAGATOR_MODES:
            raise ModelError(f"propagator.mode must be one of {PROPAGATOR_MODES}")
        if self.coupling not in COUPLINGS:
            raise ModelError(f"coupling must be one of {COUPLINGS}")
        if self.beta_mode not in BETA_MODES:
            raise ModelError(f"beta.mode must be one of {BETA_MODES}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ModelError(f"variance.mode must be one of {VARIANCE_MODES}")
        if self.variance_mode == "constant" and not (self.variance_value and self.variance_value > 0):
            raise ModelError("variance.mode=constant needs a positive variance.value")
        if self.r < 1:
            raise ModelError("r must be at least 1")


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 10000
    burn_in: int = 1000
    chains: int = 3
    seed: int = 0


# ---------------------------------------------------------------- structure


@dataclass
class Structure:
    """Everything that depends on the prediction support and covariates, not on data."""

    support: MultivariateSupport
    graph: AdjacencyGraph
    config: ModelConfig
    X: list
    covariate_names: list
    bases: list
    M: list
    K_star: list
    W_star: list
    lifted: list
    floored: list
    r: int
    cache_stats: dict

    @property
    def T(self) -> int:
        return self.support.T


def _load_target(spec, support: MultivariateSupport):
    if isinstance(spec, str):
        if spec == "car":
            return None
        if spec.startswith("file:"):
            path = Path(spec[5:])
            mat = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
            return [mat] * support.T
        raise ModelError(f"prior.target must be 'car' or 'file:<path>', got {spec!r}")
    return list(spec)


def build_structure(support: MultivariateSupport, graph: AdjacencyGraph, config: ModelConfig = ModelConfig(),
                    covariates: CovariateTable | None = None, cache: BasisCache | None = None) -> Structure:
    config.validate()
    T = support.T
    X = [config.covariates.design(support, t, covariates) for t in range(T)]
    names = config.covariates.column_names(support)
    for t in range(T):
        p = X[t].shape[1]
        if p and matrix_rank(X[t]) < p:
            warnings.warn(f"time {support.times[t]}: design matrix is rank deficient; "
                          "using the pseudo-inverse projector", RuntimeWarning)
    A = [block_adjacency(graph, support, t, config.coupling) for t in range(T)]
    targets = _load_target(config.prior_target, support)
    for t in range(T):
        if support.N(t) == 0:
            raise ModelError(f"time {support.times[t]} has no prediction cells")
    bound = min(max_rank(X[t], support.N(t)) for t in range(T))
    r = min(config.r, bound)
    if r < 1:
        raise ModelError(f"r is infeasible: N_t - rank(X_t) = {bound} at the tightest time point")
    if r < config.r:
        msg = f"r={config.r} exceeds N_t - rank(X_t) = {bound}; capping at r={r}"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning)

    cache = cache if cache is not None else BasisCache()
    b_hits, b_miss = cache.hits, cache.misses
    bases = [cache.get(X[t], A[t], r, support.prediction_cells[t]) for t in range(T)]

    prop_cache, prior_cache = {}, {}
    stats = {"propagator": [0, 0], "prior": [0, 0]}
    M = [None]
    for t in range(1, T):
        key = (array_digest(bases[t].S), array_digest(X[t]), config.propagator_mode)
        if key in prop_cache:
            stats["propagator"][0] += 1
        else:
            stats["propagator"][1] += 1
            prop_cache[key] = mi_propagator(build_B(bases[t].S, X[t]), config.propagator_mode)
        M.append(prop_cache[key])

    K_star, floored = [], []
    for t in range(T):
        P = car_target_precision(A[t]) if targets is None else np.asarray(targets[t], dtype=float)
        if P.shape != (support.N(t), support.N(t)):
            raise ModelError(f"target precision at time {support.times[t]} has shape {P.shape}, "
                             f"expected {(support.N(t), support.N(t))}")
        key = (array_digest(bases[t].S), array_digest(P), config.eigen_floor)
        if key in prior_cache:
            stats["prior"][0] += 1
        else:
            stats["prior"][1] += 1
            prior_cache[key] = k_star_multi([bases[t].S], [P], config.eigen_floor)
        K, nf = prior_cache[key]
        K_star.append(K)
        floored.append(nf)

    W_star, lifted = [None], [False]
    for t in range(1, T):
        W, flag = w_star(K_star[t], K_star[t - 1], M[t])
        W_star.append(W)
        lifted.append(flag)

    stats["basis"] = [cache.hits - b_hits, cache.misses - b_miss]
    return Structure(support, graph, config, X, names, bases, M, K_star, W_star, lifted, floored, r,
                     {k: tuple(v) for k, v in stats.items()})


# ---------------------------------------------------------------- model


@dataclass
class Model:
    structure: Structure
    support: MultivariateSupport  # carries the observed masks
    observations: ObservationTable
    obs_rows: list  # per t: row indices (into prediction cells) of observed cells, in data order
    data: StateSpaceData
    group_of_variable: dict

    @property
    def config(self) -> ModelConfig:
        return self.structure.config

    @property
    def T(self) -> int:
        return self.support.T

    def deviations(self) -> dict:
        return {
            "t1_filter_update": True,
            "smoother_gain_uses_transition_into_t_plus_1": True,
            "sigma_xi_shape_uses_n_t": True,
            "sigma_k_shape_uses_rank_of_W_star": any(
                np.linalg.matrix_rank(W) < self.structure.r for W in self.structure.W_star[1:]
            ),
            "r_capped": self.structure.r < self.config.r,
            "lifted_flags": [bool(f) for f in self.structure.lifted],
            "eigenvalue_floors": [int(f) for f in self.structure.floored],
        }


def _default_groups(support: MultivariateSupport) -> dict:
    half = math.ceil(support.L / 2)
    return {v: (0 if k < half else 1) for k, v in enumerate(support.variables)}


def bind(structure: Structure, support: MultivariateSupport, observations: ObservationTable) -> Model:
    """Attach observations to a structure; ``support`` supplies the observed masks."""
    cfg = structure.config
    base = structure.support
    if support.T != base.T or any(
        not np.array_equal(a, b) for a, b in zip(support.prediction_cells, base.prediction_cells)
    ):
        raise ModelError("support prediction cells differ from the structure's support")
    var_idx = {v: k for k, v in enumerate(support.variables)}
    time_idx = {s: k for k, s in enumerate(support.times)}
    unit_idx = {u: k for k, u in enumerate(support.unit_ids)}
    lookups = [support.cell_index(t) for t in range(support.T)]

    per_t = [[] for _ in range(support.T)]
    for i, (v, s, u) in enumerate(observations.keys()):
        try:
            t = time_idx[s]
            row = lookups[t][(var_idx[v], unit_idx[u])]
        except KeyError:
            raise ModelError(f"observation (variable {v}, time {s}, unit {u}) is not a prediction cell") from None
        if not support.observed[t][row]:
            raise ModelError(f"observation (variable {v}, time {s}, unit {u}) is on an unobserved cell")
        per_t[t].append((row, i))

    if cfg.variance_groups:
        groups = {str(k): int(g) - 1 for k, g in cfg.variance_groups.items()}
        missing = [v for v in support.variables if v not in groups]
        if missing:
            raise ModelError(f"variance.groups has no entry for variables {missing}")
    elif cfg.variance_mode == "reweighted":
        groups = _default_groups(support)
    else:
        groups = {v: 0 for v in support.variables}
    n_groups = max(groups.values()) + 1 if cfg.variance_mode == "reweighted" else 1

    S_obs, X_obs, z, v_base, grp, obs_rows = [], [], [], [], [], []
    for t in range(support.T):
        entries = sorted(per_t[t])
        rows = np.array([r for r, _ in entries], dtype=int)
        ids = np.array([i for _, i in entries], dtype=int)
        n_expected = support.n(t)
        if len(rows) != n_expected:
            raise ModelError(f"time {support.times[t]}: {n_expected} observed cells but {len(rows)} observations")
        obs_rows.append(rows)
        cells = support.prediction_cells[t][rows] if len(rows) else np.zeros((0, 2), dtype=int)
        S_obs.append(basis_rows_for(structure.bases[t], cells))
        X_obs.append(structure.X[t][rows])
        z.append(observations.value[ids])
        var = observations.variance[ids]
        if cfg.variance_mode == "constant":
            var = np.full(len(ids), float(cfg.variance_value))
        elif np.isnan(var).any():
            raise ModelError(f"time {support.times[t]}: variance.mode={cfg.variance_mode} "
                             "requires a variance for every observation")
        v_base.append(var)
        if cfg.variance_mode == "reweighted":
            grp.append(np.array([groups[support.variables[c]] for c in cells[:, 0]], dtype=int))
        else:
            grp.append(np.zeros(len(ids), dtype=int))

    data = StateSpaceData(
        S=S_obs, X=X_obs, z=z, v_base=v_base, group=grp,
        M=structure.M, K1_star=structure.K_star[0], W_star=structure.W_star,
        variance_mode=cfg.variance_mode, beta_mode=cfg.beta_mode, n_groups=n_groups, hyper=cfg.hyper,
    )
    return Model(structure, support, observations, obs_rows, data, groups)


def assemble(support: MultivariateSupport, graph: AdjacencyGraph, observations: ObservationTable | None,
             covariates: CovariateTable | None = None, config: ModelConfig = ModelConfig(),
             cache: BasisCache | None = None) -> Model:
    """Build bases, propagators and prior shapes on ``D_P,t`` and bind the observations.

    ``observations=None`` binds an empty table (every cell unobserved).
    """
    structure = build_structure(support, graph, config, covariates, cache)
    if observations is None:
        observations = ObservationTable([], [], [], np.zeros(0), np.zeros(0))
        support = support.with_observed([np.zeros(len(m), dtype=bool) for m in support.observed])
    return bind(structure, support, observations)


def fit(model: Model, mcmc: McmcConfig = McmcConfig(), progress=None) -> list[PosteriorDraws]:
    out = []
    for c in range(mcmc.chains):
        draws = gibbs_chain(model.data, mcmc.iterations, mcmc.burn_in, mcmc.seed, c, progress)
        draws.metadata = {
            "seed": mcmc.seed,
            "chain": c,
            "iterations": mcmc.iterations,
            "burn_in": mcmc.burn_in,
            "retained": draws.retained,
            "r": model.structure.r,
            "deviations": model.deviations(),
        }
        out.append(draws)
    return out


# ---------------------------------------------------------------- prediction


@dataclass
class PredictionSet:
    """Posterior summaries at every prediction cell, per time point."""

    support: MultivariateSupport
    post_mean: list
    post_var: list
    mu_mean: list
    basis_mean: list  # posterior mean of S'eta
    xi_mean: list

    @property
    def root_mspe(self) -> list:
        return [np.sqrt(v) for v in self.post_var]

    def stacked(self, name: str) -> np.ndarray:
        return np.concatenate(getattr(self, name))

    def to_csv(self) -> str:
        sup = self.support
        lines = ["variable,time,unit,post_mean,root_mspe,mu_mean"]
        for t, time in enumerate(sup.times):
            rm = self.root_mspe[t]
            for k, (v, u) in enumerate(sup.prediction_cells[t]):
                lines.append(f"{sup.variables[v]},{time},{sup.unit_ids[u]},"
                             f"{float(self.post_mean[t][k])!r},{float(rm[k])!r},{float(self.mu_mean[t][k])!r}")
        return "\n".join(lines) + "\n"


def _as_list(draws) -> list:
    return list(draws) if isinstance(draws, (list, tuple)) else [draws]


def predict(draws, model: Model) -> PredictionSet:
    """Posterior mean and variance of ``Y = x'beta + S'eta + xi`` at all prediction cells.

    At cells without an observation, ``xi`` is drawn per iteration from
    ``N(0, sigma_xi,t^2)`` using the chain's prediction stream.
    """
    chains = _as_list(draws)
    if not chains or chains[0].retained == 0:
        raise ModelError("no posterior draws to predict from")
    st = model.structure
    T = model.T
    sums = {k: [np.zeros(model.support.N(t)) for t in range(T)] for k in ("y", "y2", "mu", "seta", "xi")}
    total = 0
    for d in chains:
        rng = chain_rng(d.seed, d.chain, stream=1)
        R = d.retained
        total += R
        for t in range(T):
            N = model.support.N(t)
            mu = d.beta_at(t) @ st.X[t].T  # (R, N)
            seta = d.eta[:, t, :] @ st.bases[t].S.T
            xi = np.sqrt(d.sigma_xi2[:, t])[:, None] * rng.standard_normal((R, N))
            rows = model.obs_rows[t]
            if len(rows):
                xi[:, rows] = d.xi[t]
            y = mu + seta + xi
            sums["y"][t] += y.sum(0)
            sums["y2"][t] += (y * y).sum(0)
            sums["mu"][t] += mu.sum(0)
            sums["seta"][t] += seta.sum(0)
            sums["xi"][t] += xi.sum(0)
    mean = [s / total for s in sums["y"]]
    var = [np.maximum(s2 / total - m * m, 0.0) for s2, m in zip(sums["y2"], mean)]
    return PredictionSet(model.support, mean, var,
                         [s / total for s in sums["mu"]],
                         [s / total for s in sums["seta"]],
                         [s / total for s in sums["xi"]])


@dataclass(frozen=True)
class ContrastSummary:
    mean: float
    variance: float
    lower: float
    upper: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance, "interval_95": [self.lower, self.upper]}


def contrast(draws, model: Model, weights: Mapping) -> ContrastSummary:
    """Posterior summary of ``sum_w w * x'beta`` over cells keyed ``(variable, time, unit)``."""
    if not weights:
        raise ModelError("contrast needs at least one weighted cell")
    sup = model.support
    var_idx = {v: k for k, v in enumerate(sup.variables)}
    time_idx = {s: k for k, s in enumerate(sup.times)}
    unit_idx = {u: k for k, u in enumerate(sup.unit_ids)}
    per_t: dict[int, np.ndarray] = {}
    for (v, s, u), w in weights.items():
        try:
            t = time_idx[str(s)]
            row = sup.cell_index(t)[(var_idx[str(v)], unit_idx[str(u)])]
        except KeyError:
            raise ModelError(f"contrast cell (variable {v}, time {s}, unit {u}) is not a prediction cell") from None
        acc = per_t.setdefault(t, np.zeros(model.structure.X[t].shape[1]))
        acc += float(w) * model.structure.X[t][row]
    samples = []
    for d in _as_list(draws):
        val = np.zeros(d.retained)
        for t, xw in per_t.items():
            val += d.beta_at(t) @ xw
        samples.append(val)
    s = np.concatenate(samples)
    lo, hi = np.percentile(s, [2.5, 97.5])
    return ContrastSummary(float(s.mean()), float(s.var()), float(lo), float(hi))
