"""Grid sweeps over (teacher width, τ, λ policy) with seed replication.

Cells whose ``(config_hash, seed)`` is already in the results store are
skipped, so an interrupted sweep resumes where it stopped.  Worker
processes only compute; the parent process is the single writer of the
store.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, SweepConfig, format_width, from_dict, with_cell
from .data import load_dataset
from .distill import ConstantLambda
from .errors import ConfigError, NonFiniteLossError
from .harness import RunRecord, ensure_student_init, run_labels, train_student_kd
from .report import report
from .store import ResultsStore


@dataclass(frozen=True)
class Cell:
    config: RunConfig
    labels: dict

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


def expand_grid(config: RunConfig) -> list[Cell]:
    """Every (width, τ, λ policy) cell, plus one hard-label baseline cell when requested."""
    sweep = config.sweep
    if sweep is None:
        raise ConfigError("config has no sweep section")
    cells: list[Cell] = []
    for width in sweep.width_factors:
        teacher = str(sweep.teacher_path(width))
        for tau in sweep.taus:
            for policy in sweep.lambda_policies:
                cfg = with_cell(config, tau=tau, lambda_policy=policy, teacher_checkpoint=teacher)
                cells.append(Cell(cfg, run_labels(cfg, float(width))))
    if sweep.include_baseline:
        cfg = with_cell(config, tau=1.0, lambda_policy=ConstantLambda(0.0), teacher_checkpoint=None)
        cells.append(Cell(cfg, run_labels(cfg, None)))
    return cells


def missing_teachers(sweep: SweepConfig) -> list[str]:
    return [
        f"width={format_width(w)} path={sweep.teacher_path(w)}"
        for w in sweep.width_factors
        if not sweep.teacher_path(w).exists()
    ]


def _run_cell(config_data: dict, seed: int, labels: dict, dataset_root, init_dir: str) -> dict:
    cfg = from_dict(config_data, source="<sweep cell>")
    return train_student_kd(cfg, seed, labels=labels, dataset_root=dataset_root, init_dir=init_dir).to_dict()


def _pretrain_students(config: RunConfig, seeds: list[int], out: Path, datasets) -> None:
    # written by the parent before any worker starts; workers only read them
    for seed in sorted(set(seeds)):
        try:
            ensure_student_init(config, seed, out_dir=out, datasets=datasets)
        except NonFiniteLossError as exc:
            print(f"[sweep] student pretrain diverged seed={seed} epoch={exc.epoch} step={exc.step}")


def sweep(
    config: RunConfig,
    seeds: list[int] | None = None,
    workers: int = 1,
    out_dir: str | os.PathLike | None = None,
    force: bool = False,
    dataset_root=None,
    emit_report: bool = True,
) -> list[RunRecord]:
    """Run every pending (cell, seed) pair and return the records of this grid."""
    seeds = list(seeds or config.seeds)
    out = Path(out_dir or config.out_dir)
    cells = expand_grid(config)
    missing = missing_teachers(config.sweep)
    if missing:
        raise ConfigError("teacher zoo is incomplete; missing checkpoints:\n" + "\n".join(f" - {m}" for m in missing))

    store = ResultsStore.in_dir(out)
    pending = [(cell, seed) for cell in cells for seed in seeds if force or not store.has(cell.config_hash, seed)]
    total = len(cells) * len(seeds)
    print(f"[sweep] cells={len(cells)} seeds={len(seeds)} runs={total} pending={len(pending)} workers={workers}")

    if pending and workers <= 1:
        datasets = load_dataset(config.dataset, dataset_root)
        for i, (cell, seed) in enumerate(pending, start=1):
            record = train_student_kd(
                cell.config, seed, labels=cell.labels, datasets=datasets, dataset_root=dataset_root, init_dir=out
            )
            store.append(record)
            print(f"[sweep] done={i}/{len(pending)} hash={record.config_hash} seed={seed} status={record.status}")
    elif pending:
        _pretrain_students(config, [seed for _, seed in pending], out, load_dataset(config.dataset, dataset_root))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_run_cell, cell.config.to_dict(), seed, cell.labels, dataset_root, str(out)): (cell, seed)
                for cell, seed in pending
            }
            for i, future in enumerate(as_completed(futures), start=1):
                record = RunRecord.from_dict(future.result())
                store.append(record)
                print(f"[sweep] done={i}/{len(pending)} hash={record.config_hash} seed={record.seed} status={record.status}")

    keys = {(cell.config_hash, seed) for cell in cells for seed in seeds}
    records = [r for r in store.records() if r.key in keys]
    if emit_report and any(r.status == "ok" for r in records):
        report(records, out, formats=("csv",))
    return records
