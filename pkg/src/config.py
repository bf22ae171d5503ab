"""Run configuration: dataclasses and JSON loading.

Configs are JSON files validated against ``schema/run_config.schema.json``
before they are turned into dataclasses, so a misspelled key fails loudly
with the JSON path of the offending value.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

from jsonschema import Draft7Validator
from jsonschema.exceptions import ValidationError

from .distill import ConstantLambda, GslrLambda, TeacherMode, lambda_policy_from_dict
from .errors import ConfigError, DomainError
from .models import ModelSpec
from .quantizer import QuantizerSpec

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "schema" / "run_config.schema.json"
MAX_REPORTED_ERRORS = 50
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
HASHED_SECTIONS = ("dataset", "student", "teacher", "quantizer", "distill", "optimizer")


@dataclass
class SyntheticConfig:
    num_classes: int = 10
    n_per_class: int = 200
    n_test_per_class: int | None = None
    dim: int = 20
    separation: float = 3.0
    seed: int = 0


@dataclass
class DatasetConfig:
    kind: Literal["synthetic", "idx", "cifar10"] = "synthetic"
    name: str | None = None
    num_classes: int = 10
    train_subset: int | None = None
    test_subset: int | None = None
    normalize: bool = False
    augment: bool = False
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class DistillConfig:
    tau: float = 1.0
    lambda_policy: ConstantLambda | GslrLambda = field(default_factory=lambda: ConstantLambda(0.5))
    tau_squared_scaling: bool = False
    cache_teacher_logits: bool = False

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_policy": self.lambda_policy.to_dict(),
            "tau_squared_scaling": self.tau_squared_scaling,
            "cache_teacher_logits": self.cache_teacher_logits,
        }


@dataclass
class StudentConfig:
    model: ModelSpec
    init_checkpoint: str | None = None


@dataclass
class AssistantConfig:
    """Teacher assistant distilled from the large teacher before the student runs."""

    model: ModelSpec
    checkpoint: str
    distill: DistillConfig = field(default_factory=DistillConfig)
    quantizer: QuantizerSpec | None = None
    epochs: int = 10

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "checkpoint": self.checkpoint,
            "distill": self.distill.to_dict(),
            "quantizer": None if self.quantizer is None else self.quantizer.to_dict(),
            "epochs": self.epochs,
        }


@dataclass
class TeacherConfig:
    checkpoint: str | None = None
    mode: TeacherMode = field(default_factory=TeacherMode)
    assistant: AssistantConfig | None = None

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "mode": {"kind": self.mode.kind, "bits": self.mode.bits, "delta_policy": self.mode.delta_policy},
            "assistant": None if self.assistant is None else self.assistant.to_dict(),
        }


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    teacher_epochs: int = 30
    student_epochs: int = 20


@dataclass
class SweepConfig:
    taus: list[float] = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0])
    width_factors: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    lambda_policies: list[ConstantLambda | GslrLambda] = field(
        default_factory=lambda: [ConstantLambda(0.5), GslrLambda(0.5)]
    )
    teacher_zoo_dir: str = "zoo"
    teacher_pattern: str = "teacher_w{width}.qkdc"
    include_baseline: bool = True

    def teacher_path(self, width: float) -> Path:
        return Path(self.teacher_zoo_dir) / self.teacher_pattern.format(width=format_width(width))

    def to_dict(self) -> dict:
        return {
            "taus": list(self.taus),
            "width_factors": list(self.width_factors),
            "lambda_policies": [p.to_dict() for p in self.lambda_policies],
            "teacher_zoo_dir": self.teacher_zoo_dir,
            "teacher_pattern": self.teacher_pattern,
            "include_baseline": self.include_baseline,
        }


def format_width(width: float) -> str:
    return f"{float(width):g}"


@dataclass
class RunConfig:
    dataset: DatasetConfig
    student: StudentConfig
    quantizer: QuantizerSpec
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    teacher_model: ModelSpec | None = None
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    sweep: SweepConfig | None = None
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        ds = self.dataset
        data = {
            "dataset": {
                "kind": ds.kind,
                "name": ds.name,
                "num_classes": ds.num_classes,
                "train_subset": ds.train_subset,
                "test_subset": ds.test_subset,
                "normalize": ds.normalize,
                "augment": ds.augment,
                "synthetic": vars(ds.synthetic).copy(),
            },
            "student": {"model": self.student.model.to_dict(), "init_checkpoint": self.student.init_checkpoint},
            "teacher": self.teacher.to_dict(),
            "quantizer": self.quantizer.to_dict(),
            "distill": self.distill.to_dict(),
            "optimizer": vars(self.optimizer).copy(),
            "seeds": list(self.seeds),
            "sweep": None if self.sweep is None else self.sweep.to_dict(),
            "out_dir": self.out_dir,
        }
        if self.teacher_model is not None:
            data["teacher_model"] = self.teacher_model.to_dict()
        return data

    def config_hash(self) -> str:
        """Identity of an experiment cell: every section except seeds, sweep grid and output location."""
        data = self.to_dict()
        canonical = json.dumps({k: data[k] for k in HASHED_SECTIONS}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @property
    def hard_only(self) -> bool:
        return bool(getattr(self.distill.lambda_policy, "is_hard_only", False))


def _format_error(err: ValidationError) -> str:
    loc = "$" + "".join(f"[{p!r}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    schema_loc = "/".join(str(p) for p in err.schema_path)
    return f"path={loc} schema={schema_loc} error={err.message}"


def _load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def validate_dict(data: Any, source: str = "<config>") -> None:
    validator = Draft7Validator(_load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    lines = [f"invalid config {source}:"]
    lines += [f" - {_format_error(e)}" for e in errors[:MAX_REPORTED_ERRORS]]
    if len(errors) > MAX_REPORTED_ERRORS:
        lines.append(f" ... and {len(errors) - MAX_REPORTED_ERRORS} more errors")
    raise ConfigError("\n".join(lines))


def _drop_none(data: dict) -> dict:
    return {k: v for k, v in data.items() if v is not None}


def _model(data: dict) -> ModelSpec:
    return ModelSpec.from_dict(_drop_none(data))


def _quantizer(data: dict) -> QuantizerSpec:
    try:
        return QuantizerSpec(**data)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def _distill(data: dict | None) -> DistillConfig:
    data = dict(data or {})
    if "lambda_policy" in data:
        data["lambda_policy"] = lambda_policy_from_dict(data["lambda_policy"])
    return DistillConfig(**data)


def _teacher(data: dict | None) -> TeacherConfig:
    data = dict(data or {})
    mode = TeacherMode(**_drop_none(data.get("mode") or {"kind": "float"}))
    assistant = None
    if data.get("assistant"):
        a = dict(data["assistant"])
        assistant = AssistantConfig(
            model=_model(a["model"]),
            checkpoint=a["checkpoint"],
            distill=_distill(a.get("distill")),
            quantizer=_quantizer(a["quantizer"]) if a.get("quantizer") else None,
            epochs=a.get("epochs", 10),
        )
    return TeacherConfig(checkpoint=data.get("checkpoint"), mode=mode, assistant=assistant)


def _dataset(data: dict) -> DatasetConfig:
    data = dict(data)
    synthetic = SyntheticConfig(**(data.pop("synthetic", None) or {}))
    return DatasetConfig(synthetic=synthetic, **data)


def _sweep(data: dict | None) -> SweepConfig | None:
    if data is None:
        return None
    data = dict(data)
    if "lambda_policies" in data:
        data["lambda_policies"] = [lambda_policy_from_dict(p) for p in data["lambda_policies"]]
    return SweepConfig(**data)


def _check_semantics(cfg: RunConfig) -> None:
    if not math.isfinite(cfg.distill.tau) or cfg.distill.tau <= 0:
        raise ConfigError(f"distill.tau must be positive, got {cfg.distill.tau}")
    if cfg.distill.cache_teacher_logits and cfg.dataset.augment:
        raise ConfigError("distill.cache_teacher_logits cannot be combined with dataset.augment")
    if cfg.dataset.kind == "synthetic" and cfg.dataset.synthetic.dim < cfg.dataset.synthetic.num_classes:
        raise ConfigError("dataset.synthetic.dim must be >= dataset.synthetic.num_classes")
    for name, spec in (("student.model", cfg.student.model), ("teacher_model", cfg.teacher_model)):
        if spec is not None and spec.num_classes != _dataset_classes(cfg.dataset):
            raise ConfigError(
                f"{name}.num_classes={spec.num_classes} does not match dataset classes {_dataset_classes(cfg.dataset)}"
            )
    if cfg.sweep is None and cfg.teacher.checkpoint is None and cfg.teacher.assistant is None and not cfg.hard_only:
        raise ConfigError("teacher.checkpoint is required unless the lambda policy is constant(0)")
    if cfg.teacher.assistant is not None and cfg.teacher.checkpoint is None:
        raise ConfigError("teacher.assistant needs teacher.checkpoint (the large teacher it distills from)")


def _dataset_classes(ds: DatasetConfig) -> int:
    return ds.synthetic.num_classes if ds.kind == "synthetic" else ds.num_classes


def from_dict(data: dict, source: str = "<config>") -> RunConfig:
    validate_dict(data, source)
    cfg = RunConfig(
        dataset=_dataset(data["dataset"]),
        student=StudentConfig(
            model=_model(data["student"]["model"]), init_checkpoint=data["student"].get("init_checkpoint")
        ),
        quantizer=_quantizer(data["quantizer"]),
        distill=_distill(data.get("distill")),
        optimizer=OptimizerConfig(**(data.get("optimizer") or {})),
        teacher=_teacher(data.get("teacher")),
        teacher_model=_model(data["teacher_model"]) if data.get("teacher_model") else None,
        seeds=list(data.get("seeds") or DEFAULT_SEEDS),
        sweep=_sweep(data.get("sweep")),
        out_dir=data.get("out_dir") or "runs",
    )
    _check_semantics(cfg)
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    """Load and validate a RunConfig from a JSON file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return from_dict(data, source=str(p))


def with_cell(cfg: RunConfig, *, tau: float, lambda_policy, teacher_checkpoint: str | None) -> RunConfig:
    """Copy of ``cfg`` specialised to one sweep cell."""
    return replace(
        cfg,
        distill=replace(cfg.distill, tau=float(tau), lambda_policy=lambda_policy),
        teacher=replace(cfg.teacher, checkpoint=teacher_checkpoint, assistant=None),
        sweep=None,
    )
