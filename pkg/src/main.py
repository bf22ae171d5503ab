"""Command-line entry point: ``python -m src.main <subcommand> [options]``.

Subcommands mirror the experiment pipeline: pretrain teachers (and the
full-precision student), distill quantized students, sweep grids, render
reports, and inspect checkpoints or teacher soft labels.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import RunConfig, format_width, load_config
from .data import load_dataset
from .distill import TeacherMode, TeacherNetwork, class_histogram, soft_label_stats, write_histogram_csv, write_summary_csv
from .env import env_int
from .errors import ConfigError, QkdError, UsageError
from .harness import student_init_path, train_assistant, train_student_kd, train_teacher
from .models import ModelSpec, param_count
from .report import FORMATS, report
from .store import ResultsStore
from .sweep import sweep

DEFAULT_TAUS = "1,2,5,10"


def _split_numbers(raw: str | None, kind, flag: str) -> list:
    if raw is None:
        return []
    values = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            values.append(kind(token))
        except ValueError as exc:
            raise UsageError(f"{flag} expects comma-separated {kind.__name__} values, got {token!r}") from exc
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def _require_config(ns: argparse.Namespace) -> RunConfig:
    if not ns.config:
        raise UsageError(f"{ns.command} needs --config")
    return load_config(ns.config)


def _out_dir(ns: argparse.Namespace, cfg: RunConfig | None = None) -> Path:
    if getattr(ns, "out_dir", None):
        return Path(ns.out_dir)
    env = os.getenv("QKD_OUT_DIR")
    if env:
        return Path(env)
    return Path(cfg.out_dir if cfg is not None else "runs")


def _seeds(ns: argparse.Namespace, cfg: RunConfig) -> list[int]:
    return _split_numbers(ns.seed_list, int, "--seed-list") or list(cfg.seeds)


def _workers(ns: argparse.Namespace) -> int:
    workers = ns.workers if ns.workers is not None else env_int("QKD_WORKERS", 1)
    if workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    return workers


def cmd_train_teacher(ns: argparse.Namespace) -> int:
    cfg = _require_config(ns)
    seed = _seeds(ns, cfg)[0]
    out = _out_dir(ns, cfg)
    datasets = load_dataset(cfg.dataset, ns.dataset_root)
    if ns.pretrain_student:
        target = student_init_path(cfg, seed, out)
        ck = train_teacher(cfg, seed, target, model_spec=cfg.student.model, role="student-pretrain", datasets=datasets)
        print(f"Wrote {target} (test_acc={ck.metadata['final_test_accuracy']:.4f})")
        return 0
    if ns.assistant:
        ck = train_assistant(cfg, seed, datasets=datasets)
        print(f"Wrote {cfg.teacher.assistant.checkpoint} (test_acc={ck.metadata['final_test_accuracy']:.4f})")
        return 0
    if cfg.teacher_model is None:
        raise ConfigError("train-teacher needs teacher_model in the config")
    widths = _split_numbers(ns.width_factors, float, "--width-factors")
    if widths:
        if cfg.sweep is None:
            raise ConfigError("--width-factors writes into sweep.teacher_zoo_dir; the config has no sweep section")
        for width in widths:
            spec = replace(cfg.teacher_model, width_factor=width)
            path = cfg.sweep.teacher_path(width)
            ck = train_teacher(cfg, seed, path, model_spec=spec, datasets=datasets)
            print(f"Wrote {path} (width={format_width(width)} test_acc={ck.metadata['final_test_accuracy']:.4f})")
        return 0
    target = ns.output or cfg.teacher.checkpoint or str(out / "teacher.qkdc")
    ck = train_teacher(cfg, seed, target, datasets=datasets)
    print(f"Wrote {target} (test_acc={ck.metadata['final_test_accuracy']:.4f})")
    return 0


def cmd_train_student(ns: argparse.Namespace) -> int:
    cfg = _require_config(ns)
    out = _out_dir(ns, cfg)
    store = ResultsStore.in_dir(out)
    datasets = load_dataset(cfg.dataset, ns.dataset_root)
    config_hash = cfg.config_hash()
    for seed in _seeds(ns, cfg):
        if store.has(config_hash, seed) and not ns.force_rerun:
            print(f"[train] skip hash={config_hash} seed={seed} (already recorded; use --force-rerun)")
            continue
        ckpt_path = out / "students" / f"student_{config_hash}_s{seed}.qkdc"
        record = train_student_kd(
            cfg, seed, datasets=datasets, dataset_root=ns.dataset_root, out_path=ckpt_path, init_dir=out
        )
        store.append(record)
        print(f"[train] recorded hash={config_hash} seed={seed} status={record.status} test_acc={record.final_test_accuracy}")
    return 0


def cmd_sweep(ns: argparse.Namespace) -> int:
    cfg = _require_config(ns)
    if cfg.sweep is None:
        raise UsageError("sweep needs a config with a sweep section")
    records = sweep(
        cfg,
        seeds=_seeds(ns, cfg),
        workers=_workers(ns),
        out_dir=_out_dir(ns, cfg),
        force=ns.force_rerun,
        dataset_root=ns.dataset_root,
    )
    failed = sum(1 for r in records if r.status != "ok")
    print(f"Sweep complete: records={len(records)} failed={failed}")
    return 0


def cmd_report(ns: argparse.Namespace) -> int:
    out = _out_dir(ns)
    store = ResultsStore(ns.store) if ns.store else ResultsStore.in_dir(out)
    records = store.records()
    if ns.lambda_policy:
        records = [r for r in records if r.labels.get("lambda_policy") in ns.lambda_policy or r.labels.get("baseline")]
    if ns.bits is not None:
        records = [r for r in records if r.labels.get("bits") == ns.bits]
    formats = [f.strip() for f in ns.format.split(",") if f.strip()]
    written = report(records, ns.report_dir or out, formats)
    for path in written:
        print(f"Wrote {path}")
    return 0


def cmd_analyze_softlabels(ns: argparse.Namespace) -> int:
    if not ns.checkpoint:
        raise UsageError("analyze-softlabels needs at least one --checkpoint")
    cfg = _require_config(ns)
    taus = _split_numbers(ns.taus, float, "--taus")
    train, test = load_dataset(cfg.dataset, ns.dataset_root)
    dataset = (train if ns.split == "train" else test).head(ns.limit)
    if ns.bits and ns.delta_policy is None:
        raise UsageError("--bits needs --delta-policy (l2-optimal or stddev)")
    mode = TeacherMode("quantized", ns.bits, ns.delta_policy) if ns.bits else TeacherMode()
    out = _out_dir(ns, cfg) / "softlabels"
    for path in ns.checkpoint:
        teacher = TeacherNetwork.from_checkpoint(path, mode)
        logits = teacher.logits(dataset.images)
        stem = Path(path).stem
        rows = []
        for tau in taus:
            stats = soft_label_stats(logits, tau, dataset.labels)
            rows.append(stats)
            hist = write_histogram_csv(stats, out / f"{stem}_tau{format_width(tau)}_hist.csv", label=ns.label)
            if ns.label is not None:
                mean_dist = class_histogram(stats, ns.label)
                print(f"[distill] checkpoint={stem} tau={tau:g} label={ns.label} mean_dist={json.dumps([round(float(p), 4) for p in mean_dist])}")
            print(f"Wrote {hist}")
        summary = write_summary_csv(rows, out / f"{stem}_summary.csv")
        for s in rows:
            print(f"[distill] checkpoint={stem} tau={s.tau:g} mean_entropy={s.mean_entropy:.4f} mean_peak={s.mean_peak:.4f}")
        print(f"Wrote {summary}")
    return 0


def cmd_inspect_checkpoint(ns: argparse.Namespace) -> int:
    ck = ckpt_io.load(ns.path)
    spec = ModelSpec.from_dict(ck.spec)
    payload = {
        **ck.header(),
        "param_count": ck.param_count(),
        "expected_param_count": param_count(spec),
        "tensors": {name: list(arr.shape) for name, arr in {**ck.params, **ck.buffers}.items()},
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "analyze-softlabels": cmd_analyze_softlabels,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def _add_common(p: argparse.ArgumentParser, *, seeds: bool = True) -> None:
    p.add_argument("--config", default=None, help="Path to the JSON run config")
    p.add_argument("--out-dir", default=None, help="Output directory (env QKD_OUT_DIR, else config out_dir)")
    p.add_argument(
        "--dataset-root",
        default=None,
        help="Directory holding dataset files (env QKD_DATASET_ROOT)",
    )
    if seeds:
        p.add_argument("--seed-list", default=None, help="Comma-separated seeds overriding the config (e.g. 1,2,3)")


def _parse_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Quantized student training with knowledge distillation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="Train a full-precision teacher (or teacher zoo) with hard labels")
    _add_common(t)
    t.add_argument("--output", default=None, help="Checkpoint path for a single teacher")
    t.add_argument("--width-factors", default=None, help="Comma-separated widths; writes the sweep teacher zoo")
    t.add_argument(
        "--pretrain-student",
        action="store_true",
        help="Train the configured student in full precision (student.init_checkpoint or <out-dir>/students)",
    )
    t.add_argument("--assistant", action="store_true", help="Distill the configured teacher assistant")

    s = sub.add_parser("train-student", help="Quantization-aware KD fine-tuning of the student")
    _add_common(s)
    s.add_argument("--force-rerun", action="store_true", help="Re-run seeds already in the results store")

    w = sub.add_parser("sweep", help="Run the (width x tau x lambda) grid")
    _add_common(w)
    w.add_argument("--workers", type=int, default=None, help="Parallel worker processes (env QKD_WORKERS)")
    w.add_argument("--force-rerun", action="store_true", help="Re-run cells already in the results store")

    r = sub.add_parser("report", help="Emit CSV / markdown / SVG from a results store")
    r.add_argument("--out-dir", default=None, help="Directory holding records.ndjson (env QKD_OUT_DIR)")
    r.add_argument("--store", default=None, help="Explicit path to a records.ndjson file")
    r.add_argument("--report-dir", default=None, help="Where to write report files (default: --out-dir)")
    r.add_argument("--format", default=",".join(FORMATS), help="Comma-separated subset of csv,markdown,svg")
    r.add_argument("--lambda-policy", action="append", default=None, help="Keep only this policy label (repeatable)")
    r.add_argument("--bits", type=int, default=None, help="Keep only students with this bit-width")

    a = sub.add_parser("analyze-softlabels", help="Teacher soft-label entropy and histograms across temperatures")
    _add_common(a, seeds=False)
    a.add_argument("--checkpoint", action="append", default=None, help="Teacher checkpoint (repeatable)")
    a.add_argument("--taus", default=DEFAULT_TAUS, help="Comma-separated temperatures")
    a.add_argument("--split", choices=("train", "test"), default="train")
    a.add_argument("--limit", type=int, default=None, help="Use only the first N examples")
    a.add_argument("--label", type=int, default=None, help="Restrict histograms to examples of this label")
    a.add_argument("--bits", type=int, default=None, help="Quantize the teacher to this many bits first")
    a.add_argument("--delta-policy", choices=("l2-optimal", "stddev"), default=None, help="Step-size policy for --bits")

    i = sub.add_parser("inspect-checkpoint", help="Print a checkpoint's header and parameter count as JSON")
    i.add_argument("path")

    return p.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    ns = _parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
