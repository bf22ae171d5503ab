import json
from pathlib import Path
from unittest.mock import patch

import pandas as pd
import pytest

from src import checkpoint as ckpt
from src import main
from src.harness import RunRecord
from src.store import ResultsStore


def _write_config(tmp_path: Path, data: dict) -> Path:
    path = tmp_path / "run_config.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_missing_config_is_a_usage_error(capsys):
    assert main.main(["train-student"]) == 2
    assert "error: train-student needs --config" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path, capsys):
    path = _write_config(tmp_path, {"dataset": {"kind": "tape"}})
    assert main.main(["train-student", "--config", str(path)]) == 1
    assert "error: invalid config" in capsys.readouterr().err


def test_train_teacher_then_inspect(config_data, tmp_path, capsys):
    cfg_path = _write_config(tmp_path, config_data())
    target = tmp_path / "t.qkdc"
    assert main.main(["train-teacher", "--config", str(cfg_path), "--output", str(target), "--seed-list", "0"]) == 0
    assert f"Wrote {target}" in capsys.readouterr().out
    assert ckpt.load(target).metadata["role"] == "teacher"

    assert main.main(["inspect-checkpoint", str(target)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["param_count"] == info["expected_param_count"]
    assert info["tensors"]["fc0.weight"] == [6, 32]


def test_train_teacher_writes_zoo(config_data, tmp_path, capsys):
    zoo = tmp_path / "zoo"
    data = config_data(sweep={"taus": [2], "width_factors": [1], "teacher_zoo_dir": str(zoo)})
    cfg_path = _write_config(tmp_path, data)
    assert main.main(["train-teacher", "--config", str(cfg_path), "--width-factors", "0.5,1"]) == 0
    assert (zoo / "teacher_w0.5.qkdc").exists()
    assert (zoo / "teacher_w1.qkdc").exists()
    assert ckpt.load(zoo / "teacher_w0.5.qkdc").spec["width_factor"] == 0.5
    assert "width=0.5" in capsys.readouterr().out


def test_train_student_records_and_skips(config_data, tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = _write_config(tmp_path, config_data())
    args = ["train-student", "--config", str(cfg_path), "--out-dir", str(out), "--seed-list", "1,2"]
    assert main.main(args) == 0
    store = ResultsStore.in_dir(out)
    assert len(store) == 2
    students = out / "students"
    assert len([p for p in students.glob("student_*_s*.qkdc") if not p.name.startswith("student_fp_")]) == 2
    assert len(list(students.glob("student_fp_*_s*.qkdc"))) == 2
    capsys.readouterr()

    assert main.main(args) == 0
    assert capsys.readouterr().out.count("[train] skip") == 2
    assert main.main(args + ["--force-rerun"]) == 0
    assert "[train] recorded" in capsys.readouterr().out
    assert len(ResultsStore.in_dir(out)) == 2


def test_pretrain_student_defaults_under_out_dir(config_data, tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = _write_config(tmp_path, config_data())
    args = ["train-teacher", "--config", str(cfg_path), "--out-dir", str(out), "--seed-list", "3", "--pretrain-student"]
    assert main.main(args) == 0
    (written,) = (out / "students").glob("student_fp_*_s3.qkdc")
    assert ckpt.load(written).metadata["role"] == "student-pretrain"
    assert f"Wrote {written}" in capsys.readouterr().out


def test_out_dir_from_environment(config_data, tmp_path, monkeypatch):
    env_out = tmp_path / "from-env"
    monkeypatch.setenv("QKD_OUT_DIR", str(env_out))
    cfg_path = _write_config(tmp_path, config_data())
    assert main.main(["train-student", "--config", str(cfg_path)]) == 0
    assert len(ResultsStore.in_dir(env_out)) == 1


def test_report_filters_policies(tmp_path, capsys):
    store = ResultsStore.in_dir(tmp_path)
    for i, policy in enumerate(["constant(0.5)", "gslr(0.5)", "constant(0)"]):
        for seed in (1, 2):
            store.append(
                RunRecord(
                    config_hash=f"{i:016d}",
                    seed=seed,
                    status="ok",
                    final_test_accuracy=0.6 + 0.1 * i + 0.01 * seed,
                    labels={
                        "tau": 2.0,
                        "lambda_policy": policy,
                        "bits": 2,
                        "width_factor": None if i == 2 else 1.0,
                        "baseline": i == 2,
                    },
                )
            )
    report_dir = tmp_path / "report"
    args = ["report", "--out-dir", str(tmp_path), "--report-dir", str(report_dir), "--format", "csv,markdown"]
    assert main.main(args + ["--lambda-policy", "gslr(0.5)"]) == 0
    summary = pd.read_csv(report_dir / "summary.csv")
    assert sorted(summary["lambda_policy"]) == ["constant(0)", "gslr(0.5)"]
    assert f"Wrote {report_dir / 'summary.md'}" in capsys.readouterr().out

    assert main.main(args + ["--format", "pdf"]) == 2
    assert main.main(["report", "--out-dir", str(tmp_path), "--bits", "3"]) == 2


def test_sweep_workers_from_environment(config_data, tmp_path, monkeypatch, capsys):
    cfg_path = _write_config(tmp_path, config_data(sweep={"taus": [2], "width_factors": [1]}))
    monkeypatch.setenv("QKD_WORKERS", "3")
    with patch("src.main.sweep", return_value=[]) as fake:
        assert main.main(["sweep", "--config", str(cfg_path), "--force-rerun"]) == 0
    assert fake.call_args.kwargs["workers"] == 3
    assert fake.call_args.kwargs["force"] is True
    assert "Sweep complete: records=0 failed=0" in capsys.readouterr().out

    monkeypatch.setenv("QKD_WORKERS", "0")
    assert main.main(["sweep", "--config", str(cfg_path)]) == 2


def test_sweep_without_grid_is_a_usage_error(config_data, tmp_path):
    cfg_path = _write_config(tmp_path, config_data())
    assert main.main(["sweep", "--config", str(cfg_path)]) == 2


def test_analyze_softlabels(config_data, teacher_path, tmp_path, capsys):
    out = tmp_path / "analysis"
    cfg_path = _write_config(tmp_path, config_data())
    args = [
        "analyze-softlabels",
        "--config",
        str(cfg_path),
        "--out-dir",
        str(out),
        "--checkpoint",
        str(teacher_path),
        "--taus",
        "1,4",
        "--limit",
        "30",
        "--label",
        "0",
    ]
    assert main.main(args) == 0
    stdout = capsys.readouterr().out
    assert "label=0 mean_dist=" in stdout
    summary = pd.read_csv(out / "softlabels" / "teacher_w1_summary.csv")
    assert summary["tau"].tolist() == [1.0, 4.0]
    assert summary["mean_entropy"].is_monotonic_increasing
    hist = pd.read_csv(out / "softlabels" / "teacher_w1_tau4_hist.csv")
    assert set(hist["class_id"]) == {0, 1, 2}


def test_analyze_softlabels_needs_checkpoint(config_data, tmp_path):
    cfg_path = _write_config(tmp_path, config_data())
    assert main.main(["analyze-softlabels", "--config", str(cfg_path)]) == 2


def test_analyze_quantized_teacher_needs_delta_policy(config_data, teacher_path, tmp_path, capsys):
    cfg_path = _write_config(tmp_path, config_data())
    base = ["analyze-softlabels", "--config", str(cfg_path), "--out-dir", str(tmp_path), "--checkpoint", str(teacher_path)]
    assert main.main(base + ["--bits", "4"]) == 2
    assert "--bits needs --delta-policy" in capsys.readouterr().err
    assert main.main(base + ["--bits", "4", "--delta-policy", "stddev", "--taus", "2"]) == 0


@pytest.mark.parametrize("flag", ["--seed-list", "--taus"])
def test_bad_number_lists(config_data, tmp_path, teacher_path, flag):
    cfg_path = _write_config(tmp_path, config_data())
    command = ["analyze-softlabels", "--checkpoint", str(teacher_path)] if flag == "--taus" else ["train-student"]
    assert main.main(command + ["--config", str(cfg_path), flag, "1,x"]) == 2
