"""Aggregate RunRecords into CSV tables, a markdown summary and SVG charts.

Outputs (all deterministic for a fixed set of records):

- ``records.csv``: one row per record.
- ``summary.csv``: one row per cell, mean and sample std (ddof=1) over seeds.
- ``by_width_tau.csv``: x = teacher width factor, series = τ, y = mean test accuracy.
- ``vs_baseline.csv``: each KD cell next to the hard-label baseline mean.
- ``summary.md``: markdown table ordered by (width, τ).
- ``accuracy_<policy>.svg``: one line per τ across widths with the
  baseline drawn as a black horizontal rule.
"""

from __future__ import annotations

import os
import re
from collections.abc import Iterable
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import UsageError  # noqa: E402
from .harness import RunRecord  # noqa: E402

FORMATS = ("csv", "markdown", "svg")
RECORD_COLUMNS = [
    "config_hash",
    "seed",
    "status",
    "lambda_policy",
    "width_factor",
    "tau",
    "bits",
    "teacher_mode",
    "baseline",
    "final_train_accuracy",
    "final_test_accuracy",
    "wall_time_s",
]
CELL_KEYS = ["config_hash", "lambda_policy", "width_factor", "tau", "bits", "baseline"]
SVG_HASHSALT = "qkd-report"


def records_frame(records: Iterable[RunRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        labels = r.labels or {}
        rows.append(
            {
                "config_hash": r.config_hash,
                "seed": r.seed,
                "status": r.status,
                "lambda_policy": labels.get("lambda_policy"),
                "width_factor": labels.get("width_factor"),
                "tau": labels.get("tau"),
                "bits": labels.get("bits"),
                "teacher_mode": labels.get("teacher_mode"),
                "baseline": bool(labels.get("baseline", False)),
                "final_train_accuracy": r.final_train_accuracy,
                "final_test_accuracy": r.final_test_accuracy,
                "wall_time_s": r.wall_time_s,
            }
        )
    frame = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    return frame.sort_values(["baseline", "lambda_policy", "width_factor", "tau", "seed"], na_position="first").reset_index(
        drop=True
    )


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    ok = frame[frame["status"] == "ok"]
    grouped = ok.groupby(CELL_KEYS, dropna=False, sort=True)
    summary = grouped.agg(
        n=("seed", "count"),
        mean_test_accuracy=("final_test_accuracy", "mean"),
        std_test_accuracy=("final_test_accuracy", lambda s: s.std(ddof=1)),
        mean_train_accuracy=("final_train_accuracy", "mean"),
    ).reset_index()
    return summary.sort_values(["baseline", "lambda_policy", "width_factor", "tau"], na_position="first").reset_index(
        drop=True
    )


def baseline_mean(summary: pd.DataFrame) -> float | None:
    base = summary[summary["baseline"]]
    if base.empty:
        return None
    weights = base["n"].to_numpy(dtype=float)
    return float(np.average(base["mean_test_accuracy"].to_numpy(dtype=float), weights=weights))


def width_tau_table(summary: pd.DataFrame) -> pd.DataFrame:
    kd = summary[~summary["baseline"]]
    cols = ["lambda_policy", "width_factor", "tau", "mean_test_accuracy", "std_test_accuracy", "n"]
    return kd[cols].sort_values(["lambda_policy", "width_factor", "tau"]).reset_index(drop=True)


def baseline_delta_table(summary: pd.DataFrame) -> pd.DataFrame:
    table = width_tau_table(summary).copy()
    hd = baseline_mean(summary)
    table["hd_mean_test_accuracy"] = np.nan if hd is None else hd
    table["delta_vs_hd"] = table["mean_test_accuracy"] - table["hd_mean_test_accuracy"]
    return table


def _fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def markdown_table(summary: pd.DataFrame) -> str:
    ordered = summary.sort_values(["width_factor", "tau", "lambda_policy"], na_position="first")
    lines = [
        "| width | tau | lambda | bits | mean test acc | std | n |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in ordered.itertuples(index=False):
        width = "HD" if row.baseline else _fmt(row.width_factor, 2)
        lines.append(
            f"| {width} | {_fmt(row.tau, 2)} | {row.lambda_policy} | {_fmt(row.bits)} | "
            f"{_fmt(row.mean_test_accuracy)} | {_fmt(row.std_test_accuracy)} | {row.n} |"
        )
    return "\n".join(lines) + "\n"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", text).strip("_")


def write_svg(summary: pd.DataFrame, policy: str, path: Path) -> Path:
    table = width_tau_table(summary)
    table = table[table["lambda_policy"] == policy]
    hd = baseline_mean(summary)
    with plt.rc_context({"svg.hashsalt": SVG_HASHSALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for tau, group in table.groupby("tau", sort=True):
            group = group.sort_values("width_factor")
            ax.plot(group["width_factor"], group["mean_test_accuracy"], marker="o", label=f"tau={tau:g}")
        if hd is not None:
            ax.axhline(hd, color="black", linewidth=1.2, label="HD")
        ax.set_xlabel("teacher width factor")
        ax.set_ylabel("mean test accuracy")
        ax.set_title(f"student accuracy, {policy}")
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def report(
    records: Iterable[RunRecord],
    out_dir: str | os.PathLike,
    formats: Iterable[str] = FORMATS,
) -> list[Path]:
    formats = tuple(formats)
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise UsageError(f"unknown report format(s): {sorted(unknown)}; expected {list(FORMATS)}")
    records = list(records)
    if not records:
        raise UsageError("no records selected for the report")
    frame = records_frame(records)
    summary = summarize(frame)
    if summary.empty:
        raise UsageError("every selected record failed; nothing to summarize")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit_csv(df: pd.DataFrame, name: str) -> None:
        path = out / name
        df.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
        written.append(path)

    if "csv" in formats:
        emit_csv(frame, "records.csv")
        emit_csv(summary, "summary.csv")
        emit_csv(width_tau_table(summary), "by_width_tau.csv")
        emit_csv(baseline_delta_table(summary), "vs_baseline.csv")
    if "markdown" in formats:
        path = out / "summary.md"
        path.write_text(markdown_table(summary), encoding="utf-8")
        written.append(path)
    if "svg" in formats:
        for policy in sorted(width_tau_table(summary)["lambda_policy"].dropna().unique()):
            written.append(write_svg(summary, policy, out / f"accuracy_{_slug(policy)}.svg"))
    print(f"[report] out_dir={out} records={len(frame)} cells={len(summary)} files={len(written)}")
    return written
