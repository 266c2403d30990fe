#!/usr/bin/env python3
"""
Tests for the condot command line: config handling, run directories and command summaries.
"""

import json
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd
import pytest

from condot.backend.run_store import RunStore, package_versions
from condot.cli.commands import COMMANDS, parallel_map
from condot.errors import SinkhornNotConvergedError
from condot.reporting.report_manager import ReportManager
from main import main


def _run(capsys, tmp_path, command, config=None, *extra):
    argv = [command, "--out", str(tmp_path / "runs")]
    if config is not None:
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps(config))
        argv += ["--config", str(path)]
    code = main(argv + list(extra))
    return code, json.loads(capsys.readouterr().out)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_print_defaults(capsys, command):
    assert main([command, "--print-defaults"]) == 0
    defaults = json.loads(capsys.readouterr().out)
    assert defaults["seed"] == 0


def test_unknown_config_key_exits_with_validation_code(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "counterexample", {"n": 5, "unexpected": 1})
    assert code == 2
    assert payload["error_type"] == "config"
    assert "suggestion" in payload


def test_invalid_value_exits_with_validation_code(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "counterexample", {"n": 0.5})
    assert code == 2
    assert payload["error_type"] == "config"


def test_missing_config_file(capsys, tmp_path):
    code = main(["counterexample", "--config", str(tmp_path / "missing.json")])
    assert code == 2
    assert json.loads(capsys.readouterr().out)["error_type"] == "config"


def test_numerical_failure_exits_with_code_one(capsys, tmp_path, monkeypatch):
    def failing(config, run, jobs=1):
        raise SinkhornNotConvergedError("potentials unconverged")

    config_class, _ = COMMANDS["counterexample"]
    monkeypatch.setitem(COMMANDS, "counterexample", (config_class, failing))
    code, payload = _run(capsys, tmp_path, "counterexample")
    assert code == 1
    assert payload["error_type"] == "sinkhorn"
    runs = RunStore(tmp_path / "runs").list_runs("counterexample")
    assert RunStore(tmp_path / "runs").load_manifest(runs[0])["status"] == "failed"


def test_jobs_must_be_positive(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "counterexample", None, "--jobs", "0")
    assert code == 2
    assert payload["error_type"] == "config"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2.0, 5.0, 10.0])
def test_counterexample(capsys, tmp_path, n):
    code, payload = _run(capsys, tmp_path, "counterexample", {"n": n})
    assert code == 0
    metrics = payload["metrics"]
    assert metrics["w1_joint"] == pytest.approx(1.0)
    assert metrics["w1_conditional"] == pytest.approx(n)
    assert metrics["expected_conditional_w1"] == pytest.approx(n)
    assert metrics["w1_sum_metric"] == pytest.approx(1.0)
    assert metrics["w1_joint_is_one"] and metrics["w1_conditional_is_n"]
    assert metrics["joint_below_conditional"] and metrics["sum_metric_below_conditional"]
    assert metrics["conditional_equals_expectation"]

    run_dir = payload["run_dir"]
    manifest = json.loads(open(os.path.join(run_dir, "manifest.json")).read())
    assert manifest["status"] == "success"
    assert manifest["config"]["n"] == n
    assert "numpy" in manifest["versions"]
    assert os.path.exists(os.path.join(run_dir, "metrics.csv"))
    assert "# condot counterexample" in open(os.path.join(run_dir, "report.md")).read()


def test_beta_sweep(capsys, tmp_path):
    config = {"n_samples": 200, "betas": [1.0, 100.0, 10000.0], "limit_n": 20000}
    code, payload = _run(capsys, tmp_path, "beta-sweep", config)
    assert code == 0
    metrics = payload["metrics"]
    assert metrics["leakage_non_increasing"]
    assert metrics["bound_holds"]
    assert metrics["w_y_self"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["diagonal_cost"] == pytest.approx(2.0, abs=0.1)
    table = pd.read_csv(os.path.join(payload["run_dir"], "metrics.csv"))
    assert table["beta"].tolist() == [1.0, 100.0, 10000.0]


def test_duality_check(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "duality-check", {"n_instances": 8, "max_atoms": 5})
    assert code == 0
    assert payload["metrics"]["passed"]
    assert payload["metrics"]["max_gap"] < 1e-6


def test_geodesic_check(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "geodesic-check", {})
    assert code == 0
    metrics = payload["metrics"]
    assert metrics["max_residual"] < 1e-8
    assert metrics["max_vy"] == 0.0
    assert metrics["passed"]
    trajectory = pd.read_csv(os.path.join(payload["run_dir"], "artifacts", "trajectory.csv"))
    assert sorted(trajectory["t"].unique().tolist()) == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_seed_override_is_recorded(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "geodesic-check", {}, "--seed", "7")
    assert code == 0
    manifest = json.loads(open(os.path.join(payload["run_dir"], "manifest.json")).read())
    assert manifest["seed"] == 7
    assert manifest["config"]["seed"] == 7


def test_particle_flow(capsys, tmp_path):
    config = {"betas": [1.0, 5.0], "seeds": [0], "n_per_class": 10, "iterations": 5, "epsilon": 0.05,
              "dump_trajectory": True}
    code, payload = _run(capsys, tmp_path, "particle-flow", config)
    assert code == 0
    assert payload["metrics"]["labels_fixed"]
    assert "mean_purity_beta_5" in payload["metrics"]
    artifacts = os.listdir(os.path.join(payload["run_dir"], "artifacts"))
    assert "flow_beta1_seed0.csv" in artifacts
    assert "trajectory_beta5_seed0.csv" in artifacts


def test_gmm_train_then_eval(capsys, tmp_path):
    train_config = {"train": {
        "n_train": 200, "n_val": 100, "batch_size": 50, "coupling_batch_size": 100,
        "iterations": 10, "eval_every": 5, "architecture": {"hidden": [16], "time_features": 2},
    }}
    code, payload = _run(capsys, tmp_path, "gmm-train", train_config)
    assert code == 0
    checkpoint = payload["metrics"]["checkpoint"]
    assert os.path.exists(checkpoint)
    assert payload["metrics"]["best_val_loss"] <= payload["metrics"]["initial_val_loss"]

    eval_config = {"checkpoint": checkpoint, "n_conditions": 2, "n_samples": 30, "epsilon": 0.1}
    code, payload = _run(capsys, tmp_path, "gmm-eval", eval_config)
    assert code == 0
    assert payload["metrics"]["epsilon_mean"] == 0.1
    table = pd.read_csv(os.path.join(payload["run_dir"], "metrics.csv"))
    assert len(table) == 2
    posteriors = json.loads(open(os.path.join(payload["run_dir"], "artifacts", "posteriors.json")).read())
    assert len(posteriors) == 2


@pytest.mark.slow
def test_trained_model_beats_the_prior(capsys, tmp_path):
    code, payload = _run(capsys, tmp_path, "gmm-train", {"seed": 1})
    assert code == 0
    checkpoint = payload["metrics"]["checkpoint"]
    panel = {"n_conditions": 5, "n_samples": 300, "epsilon": 0.01}
    _, trained = _run(capsys, tmp_path, "gmm-eval", dict(panel, checkpoint=checkpoint))
    _, untrained = _run(capsys, tmp_path, "gmm-eval", panel)
    assert trained["metrics"]["divergence_mean"] < untrained["metrics"]["divergence_mean"]


@pytest.mark.slow
def test_bayesian_couplings_reach_the_benchmark(capsys, tmp_path):
    panel = {"n_conditions": 20, "n_samples": 500, "epsilon": 0.01, "seed": 100}
    means = {}
    for kind in ("diagonal-bayes", "ot-bayes"):
        per_seed = []
        for seed in range(3):
            train_config = {"seed": seed, "train": {"coupling": {"kind": kind, "beta": 20.0}}}
            code, payload = _run(capsys, tmp_path, "gmm-train", train_config)
            assert code == 0
            code, payload = _run(capsys, tmp_path, "gmm-eval", dict(panel, checkpoint=payload["metrics"]["checkpoint"]))
            assert code == 0
            per_seed.append(payload["metrics"]["divergence_mean"])
        means[kind] = float(np.mean(per_seed))
    assert means["diagonal-bayes"] < 0.05
    assert means["ot-bayes"] < 0.05
    assert means["ot-bayes"] <= means["diagonal-bayes"] + 0.005


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def test_parallel_map_keeps_order():
    assert parallel_map(abs, [-3, 1, -2], jobs=1) == [3, 1, 2]
    assert parallel_map(abs, [-3, 1, -2], jobs=2) == [3, 1, 2]


def test_failed_run_still_writes_a_manifest(tmp_path):
    store = RunStore(tmp_path)
    config_class, _ = COMMANDS["counterexample"]
    with pytest.raises(RuntimeError):
        with store.open_run("counterexample", config_class(), seed=0):
            raise RuntimeError("boom")
    runs = store.list_runs("counterexample")
    assert len(runs) == 1
    assert store.load_manifest(runs[0])["status"] == "failed"


def test_report_templates_cover_every_command():
    available = ReportManager().get_available_templates()
    for command in COMMANDS:
        assert command.replace("-", "_") in available


def test_package_versions_lists_the_stack():
    versions = package_versions()
    assert {"python", "numpy", "scipy", "POT", "pandas"} <= set(versions)
