import csv
import io
import json
import statistics

import numpy as np
import pytest
import yaml

from mstm.cli import main
from mstm.config import ConfigError, load_tree, model_from_dict

SIM = {
    "lattice": {"nrow": 3, "ncol": 3},
    "n_variables": 2,
    "n_times": 3,
    "model": {"r": 3, "covariates": {"terms": ["variable"]}},
    "seed": 7,
    "observed_fraction": 1.0,
    "sigma_eps2": 0.0,
    "mcmc": {"iterations": 80, "burn_in": 20, "chains": 2, "seed": 3},
    "output": "sim",
}


def _simulate(tmp_path, **overrides):
    cfg = dict(SIM, **overrides)
    path = tmp_path / "sim.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["simulate", str(path)]) == 0
    return tmp_path / cfg["output"]


def _files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_missing_config_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["fit", str(missing)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["status"] == "error" and str(missing) in err["path"]


def test_missing_input_file_names_path(tmp_path, capsys):
    sim = _simulate(tmp_path)
    (sim / "support.csv").unlink()
    assert main(["fit", str(sim / "fit_config.yaml")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["path"].endswith("support.csv")


def test_invalid_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(dict(SIM, unknown_key=1)))
    assert main(["simulate", str(path)]) == 2
    path.write_text(yaml.safe_dump(dict(SIM, model={"r": 0})))
    assert main(["simulate", str(path)]) == 2


def test_fit_artifacts_and_draw_count(tmp_path):
    sim = _simulate(tmp_path)
    assert main(["fit", str(sim / "fit_config.yaml")]) == 0
    out = sim / "fit"
    meta = json.loads((out / "run_metadata.json").read_text())
    assert meta["seed"] == 3 and meta["retained_per_chain"] == 60
    assert meta["deviations"]["t1_filter_update"] is True
    assert {"lifted_flags", "eigenvalue_floors"} <= set(meta["deviations"])
    assert "numpy" in meta["versions"]
    rows = (out / "draws" / "chain1_scalars.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == 60
    assert (out / "diagnostics.json").is_file()


def test_fit_determinism(tmp_path, monkeypatch):
    sim = _simulate(tmp_path)
    cfg = sim / "fit_config.yaml"
    runs = {}
    for name in ("a", "b"):
        monkeypatch.setenv("MSTM_OUTPUT_DIR", str(tmp_path / name))
        assert main(["fit", str(cfg)]) == 0
        runs[name] = _files(tmp_path / name / "draws")
    assert runs["a"] == runs["b"]
    tree = yaml.safe_load(cfg.read_text())
    tree["mcmc"]["seed"] = 4
    cfg.write_text(yaml.safe_dump(tree))
    monkeypatch.setenv("MSTM_OUTPUT_DIR", str(tmp_path / "c"))
    assert main(["fit", str(cfg)]) == 0
    other = _files(tmp_path / "c" / "draws")
    assert other.keys() == runs["a"].keys()
    assert all(other[k] != runs["a"][k] for k in other)


def test_predict_and_diagnostics(tmp_path):
    sim = _simulate(tmp_path)
    cfg = sim / "fit_config.yaml"
    tree = yaml.safe_load(cfg.read_text())
    tree["contrasts"] = [{"name": "gap", "weights": [
        {"variable": "2", "time": "1", "unit": "r0c0", "weight": 1.0},
        {"variable": "1", "time": "1", "unit": "r0c0", "weight": -1.0}]}]
    cfg.write_text(yaml.safe_dump(tree))
    assert main(["fit", str(cfg)]) == 0
    assert main(["predict", str(sim / "fit")]) == 0
    rows = list(csv.DictReader(io.StringIO((sim / "fit" / "predictions.csv").read_text())))
    assert list(rows[0]) == ["variable", "time", "unit", "post_mean", "root_mspe", "mu_mean"]
    assert len(rows) == 3 * 3 * 2 * 3
    assert all(float(r["root_mspe"]) >= 0 for r in rows)
    gap = json.loads((sim / "fit" / "contrasts.json").read_text())["gap"]
    assert gap["interval_95"][0] <= gap["mean"] <= gap["interval_95"][1]
    assert main(["diagnostics", str(sim / "fit")]) == 0
    traces = (sim / "fit" / "traces.csv").read_text().strip().splitlines()
    assert traces[0].startswith("chain,iteration,")
    assert len(traces) - 1 == 2 * 60


def test_predict_rejects_other_format_version(tmp_path, capsys):
    sim = _simulate(tmp_path)
    assert main(["fit", str(sim / "fit_config.yaml")]) == 0
    meta_path = sim / "fit" / "run_metadata.json"
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = 99
    meta_path.write_text(json.dumps(meta))
    assert main(["predict", str(sim / "fit")]) == 2
    assert "version" in capsys.readouterr().err


def test_simulate_reproducible_and_row_counts(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _files(_simulate(tmp_path / "a"))
    b = _files(_simulate(tmp_path / "b"))
    assert a == b
    truth = a["truth.csv"].decode().strip().splitlines()
    assert len(truth) - 1 == 9 * 2 * 3
    support = a["support.csv"].decode().strip().splitlines()
    assert len(support) - 1 == 9 * 2 * 3


def test_simulate_masks_and_perturbs(tmp_path):
    sim = _simulate(tmp_path, observed_fraction=0.67, sigma_eps2="auto")
    obs = sim / "observations.csv"
    assert len(obs.read_text().strip().splitlines()) - 1 == 6 * 2 * 3
    meta = json.loads((sim / "simulation_metadata.json").read_text())
    assert meta["sigma_eps2"] > 0


def test_study_smoke(tmp_path):
    cfg = {
        "replicates": 2,
        "lattice": {"nrow": 3, "ncol": 3},
        "n_variables": 2,
        "n_times": 2,
        "model": {"r": 3, "covariates": {"terms": ["variable"]}},
        "mcmc": {"iterations": 60, "burn_in": 10, "chains": 1},
        "observed_fraction": 0.65,
        "sigma_eps2": "auto",
        "seed": 2,
        "output": "study",
    }
    path = tmp_path / "study.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["study", str(path)]) == 0
    report = json.loads((tmp_path / "study" / "study_report.json").read_text())
    assert report["config"]["replicates"] == 2
    assert report["config"]["observed_fraction"] == 0.65
    rows = list(csv.DictReader(io.StringIO((tmp_path / "study" / "replicates.csv").read_text())))
    vals = [float(r["stspe_missing"]) for r in rows]
    assert report["summary"]["stspe_missing"]["median"] == pytest.approx(statistics.median(vals), rel=1e-12)


def test_full_protocol_study_config_accepted(tmp_path):
    from mstm.config import study_from_dict
    cfg = study_from_dict({"replicates": 50, "observed_fraction": 0.65, "sigma_eps2": "auto",
                           "model": {"r": 30}})
    assert (cfg.replicates, cfg.observed_fraction, cfg.sigma_eps2) == (50, 0.65, "auto")


def test_model_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        model_from_dict({"r": 3, "propagator": {"mode": "bogus"}}, tmp_path)
    with pytest.raises(ConfigError):
        model_from_dict({"coupling": "none"}, tmp_path)
    with pytest.raises(FileNotFoundError):
        load_tree(tmp_path / "absent.yaml")
    cfg = model_from_dict({"r": 2, "prior": {"target": "file:t.csv"}}, tmp_path)
    assert cfg.prior_target == "file:" + str(tmp_path / "t.csv")
    np.testing.assert_equal(cfg.r, 2)
