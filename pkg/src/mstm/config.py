"""Declarative YAML/JSON configuration trees for fits, simulations and studies."""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

import yaml

from .model import CovariateSpec, McmcConfig, ModelConfig
from .sampler import Hyperparameters
from .study import GenerativeConfig, StudyConfig


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


def load_tree(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    try:
        tree = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config: {exc}", str(path)) from None
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping", str(path))
    return tree


def _check_keys(tree: dict, allowed, where: str):
    extra = set(tree) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _sub(tree: dict, key: str) -> dict:
    value = tree.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def hyper_from_dict(tree: dict) -> Hyperparameters:
    _check_keys(tree, [f.name for f in fields(Hyperparameters)], "model.hyper")
    if tree.get("mu_beta") is not None:
        tree = {**tree, "mu_beta": tuple(float(x) for x in tree["mu_beta"])}
    return Hyperparameters(**tree)


def covariates_from_dict(tree: dict) -> CovariateSpec:
    _check_keys(tree, ["intercept", "terms", "columns", "factors"], "model.covariates")
    factors = {str(k): {str(f): str(lv) for f, lv in v.items()} for k, v in (tree.get("factors") or {}).items()}
    return CovariateSpec(
        intercept=bool(tree.get("intercept", True)),
        terms=tuple(tree.get("terms") or ()),
        columns=tuple(tree.get("columns") or ()),
        factors=factors,
    )


def model_from_dict(tree: dict, base_dir: Path | None = None) -> ModelConfig:
    _check_keys(tree, ["r", "coupling", "propagator", "prior", "beta", "variance", "covariates", "hyper",
                       "eigen_floor"], "model")
    if "r" not in tree:
        raise ConfigError("model.r is required")
    prop = _sub(tree, "propagator")
    prior = _sub(tree, "prior")
    beta = _sub(tree, "beta")
    var = _sub(tree, "variance")
    _check_keys(prop, ["mode"], "model.propagator")
    _check_keys(prior, ["target"], "model.prior")
    _check_keys(beta, ["mode"], "model.beta")
    _check_keys(var, ["mode", "value", "groups"], "model.variance")
    target = prior.get("target", "car")
    if isinstance(target, str) and target.startswith("file:") and base_dir is not None:
        target = "file:" + str((base_dir / target[5:]).resolve())
    kwargs = dict(
        r=int(tree["r"]),
        coupling=tree.get("coupling", "same_unit"),
        propagator_mode=prop.get("mode", "reduced"),
        prior_target=target,
        beta_mode=beta.get("mode", "shared"),
        variance_mode=var.get("mode", "known"),
        variance_value=None if var.get("value") is None else float(var["value"]),
        variance_groups=None if not var.get("groups") else {str(k): int(g) for k, g in var["groups"].items()},
        covariates=covariates_from_dict(_sub(tree, "covariates")),
        hyper=hyper_from_dict(_sub(tree, "hyper")),
    )
    if "eigen_floor" in tree:
        kwargs["eigen_floor"] = float(tree["eigen_floor"])
    cfg = ModelConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.coupling not in ("none", "same_unit"):
        raise ConfigError("model.coupling must be 'none' or 'same_unit'")
    return cfg


def mcmc_from_dict(tree: dict, defaults: McmcConfig = McmcConfig()) -> McmcConfig:
    _check_keys(tree, ["iterations", "burn_in", "chains", "seed"], "mcmc")
    cfg = McmcConfig(
        iterations=int(tree.get("iterations", defaults.iterations)),
        burn_in=int(tree.get("burn_in", defaults.burn_in)),
        chains=int(tree.get("chains", defaults.chains)),
        seed=int(tree.get("seed", defaults.seed)),
    )
    if cfg.chains < 1 or cfg.burn_in < 0 or cfg.iterations <= cfg.burn_in:
        raise ConfigError("mcmc needs chains >= 1 and 0 <= burn_in < iterations")
    return cfg


def generator_from_dict(tree: dict) -> GenerativeConfig:
    _check_keys(tree, [f.name for f in fields(GenerativeConfig)], "generator")
    kw = dict(tree)
    if "beta" in kw:
        kw["beta"] = tuple(float(b) for b in kw["beta"])
    return GenerativeConfig(**kw)


STUDY_KEYS = ["replicates", "observed_fraction", "sigma_eps2", "lattice", "n_variables", "n_times",
              "model", "mcmc", "generator", "inflate_variance", "seed", "output"]


def study_from_dict(tree: dict) -> StudyConfig:
    _check_keys(tree, STUDY_KEYS, "study config")
    base = StudyConfig()
    lattice = _sub(tree, "lattice")
    _check_keys(lattice, ["nrow", "ncol"], "lattice")
    sigma = tree.get("sigma_eps2", base.sigma_eps2)
    cfg = StudyConfig(
        replicates=int(tree.get("replicates", base.replicates)),
        observed_fraction=float(tree.get("observed_fraction", base.observed_fraction)),
        sigma_eps2=sigma if sigma == "auto" else float(sigma),
        nrow=int(lattice.get("nrow", base.nrow)),
        ncol=int(lattice.get("ncol", base.ncol)),
        n_variables=int(tree.get("n_variables", base.n_variables)),
        n_times=int(tree.get("n_times", base.n_times)),
        model=model_from_dict(tree["model"]) if "model" in tree else base.model,
        mcmc=mcmc_from_dict(_sub(tree, "mcmc"), base.mcmc),
        generator=generator_from_dict(_sub(tree, "generator")),
        inflate_variance=bool(tree.get("inflate_variance", base.inflate_variance)),
        seed=int(tree.get("seed", base.seed)),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def model_to_dict(cfg: ModelConfig) -> dict:
    """Inverse of :func:`model_from_dict` (echoed into run metadata)."""
    cov = cfg.covariates
    return {
        "r": cfg.r,
        "coupling": cfg.coupling,
        "propagator": {"mode": cfg.propagator_mode},
        "prior": {"target": cfg.prior_target if isinstance(cfg.prior_target, str) else "matrix"},
        "beta": {"mode": cfg.beta_mode},
        "variance": {"mode": cfg.variance_mode, "value": cfg.variance_value,
                     "groups": dict(cfg.variance_groups) if cfg.variance_groups else None},
        "covariates": {"intercept": cov.intercept, "terms": list(cov.terms), "columns": list(cov.columns),
                       "factors": {k: dict(v) for k, v in cov.factors.items()}},
        "hyper": {f.name: getattr(cfg.hyper, f.name) if f.name != "mu_beta" or cfg.hyper.mu_beta is None
                  else list(cfg.hyper.mu_beta) for f in fields(Hyperparameters)},
        "eigen_floor": cfg.eigen_floor,
    }
