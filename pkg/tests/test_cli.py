import json
from pathlib import Path

import pandas as pd
import pytest

from main import build_parser, main, resolve_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_writes_trace(tmp_path, capsys):
    out = tmp_path / "sim"
    assert run("simulate", "--policy", "sp1", "--pairs", 2, "--duration", 0.01, "--out", out) == 0
    trace = pd.read_csv(out / "trace.csv")
    assert {"time_s", "flow_id", "x1", "x2", "x3", "x4", "action"} <= set(trace.columns)
    assert trace.groupby("flow_id").size().tolist() == [10, 10]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"
    assert manifest["seed"] == 0
    for name in ("link.csv", "flows.csv", "trace.json"):
        assert (out / name).exists()
    assert "✅" in capsys.readouterr().out


def test_simulate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--pairs", 3, "--duration", 0.01, "--seed", 5, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_invalid_capacity(tmp_path, capsys):
    assert run("simulate", "--capacity", 0, "--out", tmp_path) == 2
    assert "--capacity" in capsys.readouterr().err


def test_bad_policy_expression(tmp_path, capsys):
    assert run("simulate", "--policy", "cos(x1", "--duration", 0.01, "--out", tmp_path) == 2
    assert "❌" in capsys.readouterr().err


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["simulate", "--pairs", "0"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["evaluate", "--phase", "three"])


def test_simulate_takes_one_pair_count(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["simulate", "--pairs", "1,2"])
    assert info.value.code == 2
    assert "single pair count" in capsys.readouterr().err
    assert build_parser().parse_args(["simulate", "--pairs", "3"]).pairs == 3


def test_regress_missing_dataset(tmp_path, capsys):
    assert run("regress", "--dataset", tmp_path / "missing.csv", "--out", tmp_path) == 2
    assert "dataset not found" in capsys.readouterr().err
    assert run("regress", "--out", tmp_path) == 2


@pytest.mark.parametrize("body", [
    "x1,x2,x3,x4,action\n",
    "x1,x2,x3,x4,action\n1e-4,1e-3,1.0,0.0,1.0\n2e-4,2e-3,1.5,0.0,1.0\n",
])
def test_regress_unusable_dataset(tmp_path, capsys, body):
    dataset = tmp_path / "dataset.csv"
    dataset.write_text(body)
    assert run("regress", "--dataset", dataset, "--iterations", 1, "--out", tmp_path / "hof") == 2
    assert "dataset.csv" in capsys.readouterr().err
    assert not (tmp_path / "hof" / "hall_of_fame.json").exists()


def test_unknown_config_field(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"scenario": {"bottleneck_capacity": 500}}))
    assert run("simulate", "--config", config, "--out", tmp_path / "out") == 2
    assert "scenario.bottleneck_capacity" in capsys.readouterr().err


def test_unknown_config_section(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"simulation": {}}))
    assert run("simulate", "--config", config, "--out", tmp_path / "out") == 2
    assert "simulation" in capsys.readouterr().err


def test_config_syntax_error_location(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text('{\n  "scenario": {\n    "duration_s": 0.01,\n  }\n}\n')
    assert run("simulate", "--config", config, "--out", tmp_path / "out") == 2
    assert "run.json:4:3" in capsys.readouterr().err


def test_config_invalid_value(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"regression": {"risk_quantile": 1.5}}))
    assert run("simulate", "--config", config, "--out", tmp_path / "out") == 2
    assert "regression.risk_quantile" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["pipeline", "phase_one", "phase_two", "domain_randomized"])
def test_shipped_configs_load(name):
    path = str(CONFIGS / f"{name}.json")
    assert resolve_config(build_parser().parse_args(["analyze", "--config", path])).path == path


def test_analyze_contour(tmp_path):
    out = tmp_path / "analysis"
    assert run("analyze", "--policy", "sp1", "--figure", "contour", "--out", out) == 0
    frame = pd.read_csv(out / "contour_C1000.csv")
    assert len(frame) == 31 * 100
    summary = json.loads((out / "analysis.json").read_text())
    assert summary["level_set_C1000"] is True


def test_collect_and_regress(tmp_path, capsys):
    data = tmp_path / "data"
    assert run("collect", "--pairs", "1,2", "--duration", 0.05, "--epsilon", 0.5, "--out", data) == 0
    dataset = pd.read_csv(data / "dataset.csv")
    assert len(dataset) == 50 + 100
    assert json.loads((data / "dataset.json").read_text())["epsilon"] == 0.5

    hof_dir = tmp_path / "regress"
    assert run("regress", "--dataset", data / "dataset.csv", "--iterations", 2, "--out", hof_dir) == 0
    hall = json.loads((hof_dir / "hall_of_fame.json").read_text())
    assert hall["entries"]
    assert "Pareto front" in capsys.readouterr().out

    sim = tmp_path / "sim"
    assert run("simulate", "--policy", hof_dir / "hall_of_fame.json", "--duration", 0.01, "--out", sim) == 0
    assert (sim / "trace.csv").exists()


def test_evaluate_custom_phase(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"evaluation": {"phase": "custom", "capacities_mbps": [10, 20],
                                                 "pair_counts": [1, 2], "duration_s": 0.05}}))
    out = tmp_path / "eval"
    assert run("evaluate", "--config", config, "--policy", "sp1", "--out", out) == 0
    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 4
    assert (out / "loss_report.pdf").exists()
    assert json.loads((out / "manifest.json").read_text())["subcommand"] == "evaluate"


@pytest.mark.slow
def test_pipeline_end_to_end(tmp_path):
    config = CONFIGS / "pipeline.json"
    sim = tmp_path / "sim"
    assert run("simulate", "--config", config, "--pairs", 2, "--duration", 0.5, "--out", sim) == 0
    assert (sim / "trace.csv").exists()

    data, holdout = tmp_path / "data", tmp_path / "holdout"
    assert run("collect", "--config", config, "--seed", 1, "--jobs", 2, "--out", data) == 0
    assert json.loads((data / "dataset.json").read_text())["epsilon"] == 0.5
    assert run("collect", "--config", config, "--pairs", "3", "--duration", 1.0, "--seed", 2,
               "--out", holdout) == 0

    hof_dir = tmp_path / "regress"
    assert run("regress", "--config", config, "--dataset", data / "dataset.csv",
               "--holdout", holdout / "dataset.csv", "--out", hof_dir) == 0
    assert json.loads((hof_dir / "holdout.json").read_text())["fitness"] >= 0.8

    hall = hof_dir / "hall_of_fame.json"
    replay = tmp_path / "replay"
    assert run("simulate", "--config", config, "--policy", hall, "--duration", 0.2, "--out", replay) == 0
    assert pd.read_csv(replay / "trace.csv").action.between(0.8, 1.5).all()

    evaluation = tmp_path / "eval"
    assert run("evaluate", "--config", config, "--policy", hall, "--duration", 0.2, "--jobs", 4,
               "--out", evaluation) == 0
    assert len(pd.read_csv(evaluation / "metrics.csv")) == 15
    for name in ("aggregate.csv", "loss_report.pdf", "summary.json", "manifest.json"):
        assert (evaluation / name).exists()
