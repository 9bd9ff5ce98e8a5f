import csv
import hashlib
import json

import numpy as np
import pytest

from netctl import experiments
from netctl.errors import ParameterError, ParseError
from netctl.experiments import CurveSpec, ExperimentConfig, MpcScenario, NetworkSpec


def tiny(**kw):
    cfg = ExperimentConfig(networks=[NetworkSpec("er", n=8, avg_degree=3, k_rbf=6, r=3)],
                           n_traj=80, n_sim=3, n_test=6, n_ref=4,
                           curve=CurveSpec(horizon=3, n_runs=20),
                           sweep_k_rbf=[4], sweep_r=[1, 2], sweep_beta=[0.5],
                           mpc=MpcScenario(u_T=4.0, steps=3, seeds=[0], n_runs=2))
    return ExperimentConfig.from_dict(kw, base=cfg)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return experiments.run_experiment(tiny(), out), out


def test_tiny_pipeline_writes_report(tiny_run):
    b, out = tiny_run
    assert all(s["status"] == "ok" for s in b.stages.values())
    assert set(b.stages) == {"graph", "fit", "sweeps", "curves", "mpc"}
    for name in ("errors_by_rbf", "errors_by_r", "errors_by_R", "fraction_curves", "mpc_log",
                 "control_vs_katz", "transitions"):
        assert (out / f"{name}.csv").exists()
    assert list(read_csv(out / "errors_by_rbf.csv")[0]) == ["k_rbf", "network", "err_full",
                                                            "err_reduced"]
    assert list(read_csv(out / "fraction_curves.csv")[0]) == [
        "t", "gemf", "meanfield", "koopman_full", "koopman_reduced"]
    assert list(read_csv(out / "control_vs_katz.csv")[0]) == ["node", "katz", "u_full",
                                                              "u_reduced"]
    curves = read_csv(out / "fraction_curves.csv")
    assert len(curves) == 4
    assert curves[0]["gemf"] == curves[0]["koopman_full"]
    controllers = {r["controller"] for r in read_csv(out / "transitions.csv")}
    assert controllers == {"full", "reduced", "uniform"}
    for rel in ("artifacts/ER/graph.json", "artifacts/ER/beta0.2-0.7/dictionary.json",
                "artifacts/ER/beta0.2-0.7/model_full.json",
                "artifacts/ER/beta0.2-0.7/dataset/X.csv"):
        assert (out / rel).exists()


def test_saved_model_reloads(tiny_run):
    from netctl.koopman import KoopmanModel

    b, out = tiny_run
    m = KoopmanModel.load(out / "artifacts/ER/beta0.2-0.7/model_reduced.json")
    np.testing.assert_array_equal(m.A, b.models[("ER", "reduced")].A)


def test_manifest_deterministic(tiny_run, tmp_path):
    _, out = tiny_run
    experiments.run_experiment(tiny(), tmp_path)
    a = json.loads((out / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert a == b
    for rel, digest in a["files"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest


def test_json_format(tmp_path):
    cfg = tiny(curve=None, mpc=None, sweep_k_rbf=[], sweep_r=[], sweep_beta=[])
    experiments.run_experiment(cfg, tmp_path, fmt="json")
    rep = json.loads((tmp_path / "report.json").read_text())
    t = rep["tables"]["errors_by_range"]
    assert t["columns"][0] == "network" and len(t["rows"]) == 1
    assert not list(tmp_path.glob("*.csv"))


def test_validation_before_compute():
    with pytest.raises(ParameterError, match="n_traj"):
        experiments.run_experiment(tiny(n_traj=0))
    with pytest.raises(ParameterError):
        tiny(beta_ranges=[[0.8, 0.2]]).validate()
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"n_trajectories": 5})
    with pytest.raises(ParseError):
        ExperimentConfig.from_dict({"networks": [{"model": "er", "colour": 1}]})


def test_failed_stage_is_recorded(tmp_path, monkeypatch):
    def boom(*args):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(experiments, "_stage_mpc", boom)
    with pytest.raises(experiments.StageError) as info:
        experiments.run_experiment(tiny(sweep_k_rbf=[], sweep_r=[], sweep_beta=[]), tmp_path)
    assert info.value.stage == "mpc"
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["stages"]["mpc"]["status"] == "failed"
    assert rep["stages"]["fit"]["status"] == "ok"
    assert (tmp_path / "fraction_curves.csv").exists()


@pytest.mark.parametrize("name", experiments.PRESETS)
def test_presets_valid(name):
    for scale in experiments.SCALES:
        cfg = experiments.preset(name, scale)
        cfg.validate()
        assert cfg.anchor
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_preset_references():
    t1 = experiments.preset("table1")
    assert t1.reference["ER"][:2] == [11.55, 24.83]
    assert (t1.n_traj, t1.n_test) == (5000, 200)
    assert experiments.preset("table1", "paper").n_traj == 20000
    mb = experiments.preset("mpc-budget")
    assert mb.mpc.u_T == 70.0 and mb.mpc.p == 3
    assert mb.reference["u_T"] == 70.0 and mb.reference["p"] == 3
    with pytest.raises(ParameterError):
        experiments.preset("fig99")


def test_oscillatory_schedule_in_range():
    cfg = ExperimentConfig()
    U = experiments.input_schedule(cfg, CurveSpec(input="oscillatory", horizon=25), 0.2, 0.7, 9)
    assert U.shape == (25, 9)
    assert np.all((U >= 0.3 - 1e-12) & (U <= 0.8 + 1e-12))
    assert np.ptp(U[:, 0]) > 0.3
