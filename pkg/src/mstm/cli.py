"""Command-line entry point: ``mstm {fit,predict,diagnostics,simulate,study} <path>``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import (
    ConfigError,
    generator_from_dict,
    load_tree,
    mcmc_from_dict,
    model_from_dict,
    model_to_dict,
    study_from_dict,
)
from .diagnostics import summarize_chains
from .draws_io import read_draws, write_draws
from .graph import (
    EdgeListError,
    SupportError,
    format_edge_list,
    format_support_csv,
    lattice_graph,
    read_edge_list,
    read_support_csv,
)
from .model import (
    CovariateTable,
    McmcConfig,
    ModelError,
    ObservationTable,
    assemble,
    contrast,
    fit,
    predict,
)
from .study import (
    config_to_dict,
    mask_observed,
    observed_subset,
    perturb,
    rows_to_csv,
    run_study,
    simulate,
    study_structure,
)

FORMAT_VERSION = 1
OUTPUT_ENV = "MSTM_OUTPUT_DIR"

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_STUDY_FAILURES = 0, 1, 2, 3
INPUT_ERRORS = (FileNotFoundError, IsADirectoryError, ConfigError, ModelError, EdgeListError, SupportError,
                KeyError, ValueError)

log = logging.getLogger("mstm")


class InputError(Exception):
    def __init__(self, cause: Exception, path: str | None = None):
        super().__init__(str(cause))
        self.cause = cause
        self.path = path


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def _output_dir(configured: Path) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    out = Path(env) if env else configured
    out.mkdir(parents=True, exist_ok=True)
    return out


def _versions() -> dict:
    return {"mstm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------- fit inputs


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _load_fit_inputs(config_path: Path):
    tree = load_tree(config_path)
    base = config_path.parent
    allowed = {"data", "model", "mcmc", "output", "contrasts"}
    extra = set(tree) - allowed
    if extra:
        raise ConfigError(f"unknown keys in fit config: {sorted(extra)}", str(config_path))
    data = tree.get("data") or {}
    for key in ("edges", "support", "observations"):
        if key not in data:
            raise ConfigError(f"data.{key} is required", str(config_path))
    paths = {k: _resolve(base, v) for k, v in data.items()}
    for key, p in paths.items():
        if not p.is_file():
            raise InputError(FileNotFoundError(f"data.{key}: no such file: {p}"), str(p))
    model_cfg = model_from_dict(tree.get("model") or {}, base)
    mcmc_cfg = mcmc_from_dict(tree.get("mcmc") or {})
    graph = _guard(read_edge_list, paths["edges"])
    support = _guard(read_support_csv, paths["support"], graph)
    obs = _guard(ObservationTable.read_csv, paths["observations"])
    cov = _guard(CovariateTable.read_csv, paths["covariates"]) if "covariates" in paths else None
    model = _guard_model(lambda: assemble(support, graph, obs, cov, model_cfg))
    output = _resolve(base, tree.get("output", "fit_output"))
    return tree, model, mcmc_cfg, output, paths


def _guard(fn, path, *args):
    try:
        return fn(path, *args)
    except INPUT_ERRORS as exc:
        raise InputError(exc, str(path)) from exc


def _guard_model(fn):
    try:
        return fn()
    except INPUT_ERRORS as exc:
        raise InputError(exc) from exc


def _run_metadata(model, mcmc: McmcConfig, tree: dict, paths: dict, config_path: Path) -> dict:
    st = model.structure
    return {
        "format_version": FORMAT_VERSION,
        "versions": _versions(),
        "config_path": str(config_path.resolve()),
        "inputs": {k: str(v.resolve()) for k, v in sorted(paths.items())},
        "seed": mcmc.seed,
        "mcmc": {"iterations": mcmc.iterations, "burn_in": mcmc.burn_in, "chains": mcmc.chains},
        "retained_per_chain": mcmc.iterations - mcmc.burn_in,
        "model": model_to_dict(model.config),
        "r_effective": st.r,
        "covariate_names": st.covariate_names,
        "dimensions": {"T": model.T, "N_t": [model.support.N(t) for t in range(model.T)],
                       "n_t": [model.support.n(t) for t in range(model.T)]},
        "cache_stats": st.cache_stats,
        "eigen_floor": model.config.eigen_floor,
        "deviations": model.deviations(),
        "contrasts": tree.get("contrasts") or [],
    }


def cmd_fit(config_path: Path) -> int:
    tree, model, mcmc, configured_out, paths = _load_fit_inputs(config_path)
    out = _output_dir(configured_out)
    draws = fit(model, mcmc)
    ddir = out / "draws"
    for d in draws:
        write_draws(ddir, d)
    _dump_json(out / "run_metadata.json", _run_metadata(model, mcmc, tree, paths, config_path))
    _dump_json(out / "diagnostics.json", summarize_chains(draws) if draws[0].retained else {})
    print(json.dumps({"status": "ok", "output": str(out), "chains": len(draws),
                      "retained_per_chain": draws[0].retained}))
    return EXIT_OK


def _load_fit_dir(fit_dir: Path):
    meta_path = fit_dir / "run_metadata.json"
    if not meta_path.is_file():
        raise InputError(FileNotFoundError(f"no run_metadata.json in {fit_dir}"), str(meta_path))
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise InputError(ConfigError(f"fit format version {meta.get('format_version')} is not supported "
                                     f"(expected {FORMAT_VERSION})"), str(meta_path))
    tree, model, _, _, _ = _load_fit_inputs(Path(meta["config_path"]))
    mc = meta["mcmc"]
    draws = [
        read_draws(fit_dir / "draws", c, model.T, model.structure.r, [model.support.n(t) for t in range(model.T)],
                   model.config.beta_mode == "per_time", meta["seed"])
        for c in range(mc["chains"])
    ]
    return meta, tree, model, draws


def cmd_predict(fit_dir: Path) -> int:
    try:
        meta, tree, model, draws = _load_fit_dir(fit_dir)
    except FileNotFoundError as exc:
        raise InputError(exc) from exc
    out = _output_dir(fit_dir)
    pred = predict(draws, model)
    (out / "predictions.csv").write_text(pred.to_csv())
    results = {}
    for spec in tree.get("contrasts") or []:
        weights = {(str(w["variable"]), str(w["time"]), str(w["unit"])): float(w["weight"])
                   for w in spec.get("weights", [])}
        try:
            results[spec.get("name", f"contrast{len(results) + 1}")] = contrast(draws, model, weights).as_dict()
        except ModelError as exc:
            raise InputError(exc) from exc
    if results:
        _dump_json(out / "contrasts.json", results)
    print(json.dumps({"status": "ok", "predictions": str(out / "predictions.csv"),
                      "rows": sum(model.support.N(t) for t in range(model.T))}))
    return EXIT_OK


def cmd_diagnostics(fit_dir: Path) -> int:
    _, _, _, draws = _load_fit_dir(fit_dir)
    out = _output_dir(fit_dir)
    report = summarize_chains(draws)
    _dump_json(out / "diagnostics.json", report)
    names = list(report)
    lines = [",".join(["chain", "iteration", *names])]
    for d in draws:
        series = d.scalar_series()
        its = np.arange(d.burn_in + 1, d.iterations + 1)
        for k, i in enumerate(its):
            lines.append(f"{d.chain + 1},{i}," + ",".join(repr(float(series[n][k])) for n in names))
    (out / "traces.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps({"status": "ok", "diagnostics": str(out / "diagnostics.json")}))
    return EXIT_OK


# ---------------------------------------------------------------- simulate / study


def cmd_simulate(config_path: Path) -> int:
    tree = load_tree(config_path)
    allowed = {"lattice", "n_variables", "n_times", "model", "generator", "seed", "observed_fraction",
               "sigma_eps2", "mcmc", "output"}
    extra = set(tree) - allowed
    if extra:
        raise ConfigError(f"unknown keys in simulate config: {sorted(extra)}", str(config_path))
    try:
        study_cfg = study_from_dict({k: v for k, v in tree.items()
                                     if k in {"lattice", "n_variables", "n_times", "model", "generator", "seed"}})
        fraction = float(tree.get("observed_fraction", 1.0))
        sigma = tree.get("sigma_eps2", 0.0)
        generator_from_dict(tree.get("generator") or {})
        mcmc_tree = tree.get("mcmc") or {}
        mcmc_from_dict(mcmc_tree)
        structure = study_structure(study_cfg)
    except INPUT_ERRORS as exc:
        raise InputError(exc, str(config_path)) from exc
    out = _output_dir(_resolve(config_path.parent, tree.get("output", "simulated")))
    ss = np.random.SeedSequence(study_cfg.seed)
    sim_ss, pert_ss, mask_ss = ss.spawn(3)
    truth, latent = simulate(structure, study_cfg.generator, np.random.default_rng(sim_ss))
    table, s2 = truth, 0.0
    if sigma == "auto" or float(sigma) > 0:
        table, s2 = perturb(truth, sigma, np.random.default_rng(pert_ss))
    support = structure.support
    if fraction < 1:
        support = mask_observed(support, fraction, np.random.default_rng(mask_ss))
    graph = lattice_graph(study_cfg.nrow, study_cfg.ncol)
    (out / "edges.txt").write_text(format_edge_list(graph))
    (out / "support.csv").write_text(format_support_csv(support))
    (out / "observations.csv").write_text(observed_subset(table, support).to_csv())
    (out / "truth.csv").write_text(truth.to_csv())
    (out / "latent.csv").write_text(latent.to_csv(support))
    fit_cfg = {
        "data": {"edges": "edges.txt", "support": "support.csv", "observations": "observations.csv"},
        "model": model_to_dict(study_cfg.model),
        "mcmc": mcmc_from_dict(mcmc_tree).__dict__,
        "output": "fit",
    }
    (out / "fit_config.yaml").write_text(yaml.safe_dump(fit_cfg, sort_keys=True))
    _dump_json(out / "simulation_metadata.json", {
        "format_version": FORMAT_VERSION, "versions": _versions(), "seed": study_cfg.seed,
        "generator": config_to_dict(study_cfg.generator), "sigma_k2": latent.sigma_k2, "sigma_eps2": s2,
        "observed_fraction": fraction, "rows": len(truth),
    })
    print(json.dumps({"status": "ok", "output": str(out), "rows": len(truth)}))
    return EXIT_OK


def cmd_study(config_path: Path) -> int:
    tree = load_tree(config_path)
    try:
        cfg = study_from_dict(tree)
    except INPUT_ERRORS as exc:
        raise InputError(exc, str(config_path)) from exc
    out = _output_dir(_resolve(config_path.parent, tree.get("output", "study_output")))

    def progress(rep, row):
        log.info("replicate %d: %s", rep + 1, row["status"])

    report = run_study(cfg, progress=progress)
    report["versions"] = _versions()
    report["format_version"] = FORMAT_VERSION
    _dump_json(out / "study_report.json", report)
    (out / "replicates.csv").write_text(rows_to_csv(report["replicates"]))
    print(json.dumps({"status": "ok" if not report["failures"] else "failures", "failures": report["failures"],
                      "summary": report["summary"]}, default=_jsonable))
    return EXIT_STUDY_FAILURES if report["failures"] else EXIT_OK


COMMANDS = {
    "fit": (cmd_fit, "config", "fit configuration (YAML or JSON)"),
    "predict": (cmd_predict, "fit_dir", "output directory of a completed fit"),
    "diagnostics": (cmd_diagnostics, "fit_dir", "output directory of a completed fit"),
    "simulate": (cmd_simulate, "config", "simulation configuration"),
    "study": (cmd_study, "config", "study configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, arg, help_text) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument(arg, type=Path, help=help_text)
    return parser


def _error(kind: str, message: str, path=None, code: int = EXIT_INPUT) -> int:
    payload = {"status": "error", "kind": kind, "message": message}
    if path is not None:
        payload["path"] = str(path)
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fn, arg, _ = COMMANDS[args.command]
    target = getattr(args, arg)
    try:
        return fn(target)
    except InputError as exc:
        path = exc.path or getattr(exc.cause, "path", None) or getattr(exc.cause, "filename", None)
        return _error(type(exc.cause).__name__, str(exc), path, EXIT_INPUT)
    except FileNotFoundError as exc:
        return _error("FileNotFoundError", str(exc), exc.filename or str(exc), EXIT_INPUT)
    except ConfigError as exc:
        return _error("ConfigError", str(exc), exc.path or target, EXIT_INPUT)
    except Exception as exc:  # runtime failure after inputs validated
        log.debug("runtime failure", exc_info=True)
        return _error(type(exc).__name__, str(exc), None, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
