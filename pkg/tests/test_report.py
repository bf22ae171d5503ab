import pandas as pd
import pytest

from src import report as report_mod
from src.errors import UsageError
from src.harness import RunRecord


def _rec(cfg_hash, seed, acc, *, tau=2.0, width=1.0, policy="constant(0.5)", baseline=False, status="ok"):
    return RunRecord(
        config_hash=cfg_hash,
        seed=seed,
        status=status,
        final_train_accuracy=None if acc is None else acc + 0.05,
        final_test_accuracy=acc,
        started_at="2026-01-01T00:00:00+00:00",
        labels={
            "tau": tau,
            "lambda_policy": policy,
            "bits": 2,
            "width_factor": None if baseline else width,
            "teacher_mode": "float",
            "baseline": baseline,
        },
    )


@pytest.fixture
def records():
    return [
        _rec("a" * 16, 1, 0.80),
        _rec("a" * 16, 2, 0.84),
        _rec("b" * 16, 1, 0.90, tau=5.0, width=2.0),
        _rec("b" * 16, 2, 0.86, tau=5.0, width=2.0),
        _rec("c" * 16, 1, 0.70, tau=1.0, policy="constant(0)", baseline=True),
        _rec("c" * 16, 2, 0.72, tau=1.0, policy="constant(0)", baseline=True),
        _rec("d" * 16, 1, None, tau=2.0, width=4.0, status="failed"),
    ]


def test_summary_uses_sample_std_and_skips_failures(records):
    summary = report_mod.summarize(report_mod.records_frame(records))
    assert len(summary) == 3
    cell = summary[summary["config_hash"] == "a" * 16].iloc[0]
    assert cell["n"] == 2
    assert cell["mean_test_accuracy"] == pytest.approx(0.82)
    assert cell["std_test_accuracy"] == pytest.approx(pd.Series([0.80, 0.84]).std(ddof=1))
    assert report_mod.baseline_mean(summary) == pytest.approx(0.71)


def test_delta_table_compares_against_baseline(records):
    summary = report_mod.summarize(report_mod.records_frame(records))
    table = report_mod.baseline_delta_table(summary)
    assert list(table["width_factor"]) == [1.0, 2.0]
    assert table["hd_mean_test_accuracy"].tolist() == pytest.approx([0.71, 0.71])
    assert table["delta_vs_hd"].tolist() == pytest.approx([0.11, 0.17])


def test_report_writes_every_format(records, tmp_path, capsys):
    written = report_mod.report(records, tmp_path)
    names = sorted(p.name for p in written)
    assert names == sorted(
        ["records.csv", "summary.csv", "by_width_tau.csv", "vs_baseline.csv", "summary.md", "accuracy_constant_0.5.svg"]
    )
    assert len(pd.read_csv(tmp_path / "records.csv")) == 7
    md = (tmp_path / "summary.md").read_text(encoding="utf-8")
    assert md.startswith("| width | tau | lambda |")
    assert "| HD | 1.00 | constant(0) |" in md
    svg = (tmp_path / "accuracy_constant_0.5.svg").read_text(encoding="utf-8")
    assert svg.lstrip().startswith("<?xml")
    assert "[report] out_dir=" in capsys.readouterr().out


def test_svg_output_is_deterministic(records, tmp_path):
    report_mod.report(records, tmp_path / "one", formats=("svg",))
    report_mod.report(records, tmp_path / "two", formats=("svg",))
    name = "accuracy_constant_0.5.svg"
    assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_report_without_baseline_leaves_delta_empty(records, tmp_path):
    kd_only = [r for r in records if not r.labels["baseline"]]
    report_mod.report(kd_only, tmp_path, formats=("csv",))
    table = pd.read_csv(tmp_path / "vs_baseline.csv")
    assert table["delta_vs_hd"].isna().all()


def test_report_usage_errors(records, tmp_path):
    with pytest.raises(UsageError, match="unknown report format"):
        report_mod.report(records, tmp_path, formats=("pdf",))
    with pytest.raises(UsageError, match="no records"):
        report_mod.report([], tmp_path)
    with pytest.raises(UsageError, match="every selected record failed"):
        report_mod.report([r for r in records if r.status == "failed"], tmp_path)
