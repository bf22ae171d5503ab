"""Training loops: teacher pretraining, teacher assistants and quantized KD students.

Every loop goes through ``Trainer``.  A quantized run follows this cycle on
each batch: regenerate the quantized weights from the full-precision
shadows, forward teacher and student, mix hard and soft losses with the
current λ, backward, copy the quantized-weight gradients onto the shadows
(straight-through) and take an SGD step.  Evaluation always runs on the
quantized weights.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import arrow
import numpy as np

from . import checkpoint as ckpt_io
from .config import AssistantConfig, RunConfig
from .data import Batch, Dataset, batch_iter, load_dataset
from .distill import (
    TeacherLogitsCache,
    TeacherNetwork,
    hard_label_loss,
    kd_loss,
    soft_label_stats,
)
from .env import debug_enabled
from .errors import ConfigError, DomainError, NonFiniteLossError
from .models import ModelSpec, Network, build, restore, spec_hash
from .quantizer import QuantizerSpec, WeightQuantizer
from .tensor import SGD, Tensor, lr_for_epoch, softmax_array

SNAPSHOT_EXAMPLES = 1000

LossFn = Callable[[Tensor, Batch, int], tuple[Tensor, float]]


@dataclass
class TrainerHooks:
    on_step: Callable[[int, float, float], None] | None = None
    before_eval: Callable[[Network], None] | None = None


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    lam: float


def evaluate(model: Network, dataset: Dataset) -> tuple[float, float]:
    """(hard-label loss, accuracy) of ``model`` on ``dataset`` in its current mode."""
    logits = model.predict(dataset.images)
    if len(dataset) == 0:
        return 0.0, 0.0
    p = softmax_array(logits.astype(np.float64), 1.0)
    picked = np.maximum(p[np.arange(len(dataset)), dataset.labels], 1e-12)
    loss = float(-np.mean(np.log(picked)))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return loss, accuracy


class Trainer:
    def __init__(
        self,
        model: Network,
        config: RunConfig,
        epochs: int,
        seed: int,
        loss_fn: LossFn,
        *,
        quantizer: WeightQuantizer | None = None,
        hooks: TrainerHooks | None = None,
        role: str = "train",
    ):
        opt = config.optimizer
        self.model = model
        self.epochs = epochs
        self.seed = seed
        self.loss_fn = loss_fn
        self.quantizer = quantizer
        self.hooks = hooks or TrainerHooks()
        self.role = role
        self.schedule = opt.lr_schedule
        self.base_lr = opt.lr
        self.batch_size = opt.batch_size
        self.augment = config.dataset.augment
        self.optimizer = SGD(model.named_parameters(), opt.lr, opt.momentum, opt.weight_decay)
        self.step = 0
        self.history: list[EpochStats] = []

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def _diverged(self, what: str, epoch: int) -> NonFiniteLossError:
        return NonFiniteLossError(f"non-finite {what} at epoch {epoch} step {self.step}", epoch=epoch, step=self.step)

    def _non_finite_parameter(self) -> str | None:
        for name, p in self.model.named_parameters().items():
            if not np.all(np.isfinite(p.data)):
                return name
        return None

    def _check_parameters(self, epoch: int) -> None:
        name = self._non_finite_parameter()
        if name is not None:
            raise self._diverged(f"parameter {name}", epoch)

    def _evaluate(self, train: Dataset, test: Dataset, epoch: int) -> tuple[float, float, float]:
        self.model.eval()
        if self.quantizer is not None:
            self.quantizer.quantize()
        if self.hooks.before_eval is not None:
            self.hooks.before_eval(self.model)
        _, train_acc = evaluate(self.model, train)
        test_loss, test_acc = evaluate(self.model, test)
        if not math.isfinite(test_loss):
            raise self._diverged("evaluation loss", epoch)
        return train_acc, test_loss, test_acc

    def run_epoch(self, train: Dataset, epoch: int) -> tuple[float, float, float]:
        lr = lr_for_epoch(self.schedule, self.base_lr, epoch, self.epochs)
        self.model.train()
        if self.quantizer is not None and self.quantizer.spec.delta_update == "epoch":
            self.quantizer.update_deltas()
        debug = debug_enabled()
        total_loss, batches, lam = 0.0, 0, 0.0
        for batch in batch_iter(train, self.batch_size, self.seed, epoch, self.augment):
            if self.quantizer is not None:
                self.quantizer.quantize()
            logits = self.model(Tensor(batch.images, dtype=self.model.dtype))
            if not np.all(np.isfinite(logits.data)):
                raise self._diverged("logits", epoch)
            loss, lam = self.loss_fn(logits, batch, self.step)
            value = loss.item()
            if not math.isfinite(value):
                raise self._diverged(f"loss {value}", epoch)
            self.optimizer.zero_grad()
            loss.backward()
            if self.quantizer is not None:
                self.quantizer.apply_ste()
            self.optimizer.step(lr)
            self._check_parameters(epoch)
            if self.hooks.on_step is not None:
                self.hooks.on_step(self.step, value, lam)
            if debug:
                print(f"[train] role={self.role} epoch={epoch} step={self.step} loss={value:.6f} lambda={lam:.4f}")
            total_loss += value
            batches += 1
            self.step += 1
        return lr, total_loss / max(batches, 1), lam

    def fit(self, train: Dataset, test: Dataset) -> list[EpochStats]:
        for epoch in range(self.epochs):
            try:
                lr, train_loss, lam = self.run_epoch(train, epoch)
                train_acc, test_loss, test_acc = self._evaluate(train, test, epoch)
            except DomainError as exc:
                # weights that overflowed surface as domain errors from Δ search or the loss
                if self._non_finite_parameter() is None:
                    raise
                raise self._diverged(f"state ({exc})", epoch) from exc
            stats = EpochStats(epoch, lr, train_loss, train_acc, test_loss, test_acc, lam)
            self.history.append(stats)
            print(
                f"[train] role={self.role} epoch={epoch + 1}/{self.epochs} lr={lr:.5f} loss={train_loss:.4f} "
                f"train_acc={train_acc:.4f} test_acc={test_acc:.4f}"
            )
        return self.history


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    status: str
    epochs: list[dict] = field(default_factory=list)
    final_train_accuracy: float | None = None
    final_test_accuracy: float | None = None
    wall_time_s: float = 0.0
    started_at: str = ""
    soft_labels: dict | None = None
    diagnostic: dict | None = None
    labels: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, int]:
        return self.config_hash, self.seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunRecord:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def _datasets(config: RunConfig, datasets, dataset_root) -> tuple[Dataset, Dataset]:
    return datasets if datasets is not None else load_dataset(config.dataset, dataset_root)


def _check_compatible(spec: ModelSpec, train: Dataset, what: str) -> None:
    if spec.input_shape != train.sample_shape:
        raise ConfigError(f"{what} expects inputs {list(spec.input_shape)}, dataset provides {list(train.sample_shape)}")
    if spec.num_classes != train.num_classes:
        raise ConfigError(f"{what} has {spec.num_classes} classes, dataset has {train.num_classes}")


def _hard_loss(logits: Tensor, batch: Batch, step: int) -> tuple[Tensor, float]:
    return hard_label_loss(logits, batch.labels), 0.0


def _history_metadata(history: list[EpochStats]) -> dict:
    last = history[-1] if history else None
    return {
        "epochs": len(history),
        "final_train_accuracy": None if last is None else last.train_accuracy,
        "final_test_accuracy": None if last is None else last.test_accuracy,
    }


def train_teacher(
    config: RunConfig,
    seed: int,
    out_path: str | Path,
    *,
    model_spec: ModelSpec | None = None,
    epochs: int | None = None,
    role: str = "teacher",
    datasets: tuple[Dataset, Dataset] | None = None,
    dataset_root=None,
    dtype=np.float32,
) -> ckpt_io.Checkpoint:
    """Full-precision hard-label training; writes a checkpoint with accuracy metadata."""
    spec = model_spec or config.teacher_model
    if spec is None:
        raise ConfigError("no model to train: set teacher_model in the config")
    train, test = _datasets(config, datasets, dataset_root)
    _check_compatible(spec, train, role)
    model = build(spec, seed, dtype)
    epochs = epochs or config.optimizer.teacher_epochs
    trainer = Trainer(model, config, epochs, seed, _hard_loss, role=role)
    history = trainer.fit(train, test)
    meta = {"role": role, "seed": seed, "width_factor": spec.width_factor, **_history_metadata(history)}
    path = ckpt_io.save(model, out_path, metadata=meta)
    return ckpt_io.load(path)


def student_init_path(config: RunConfig, seed: int, out_dir: str | Path | None = None) -> Path:
    """Where the full-precision student that seeds quantized fine-tuning lives.

    An explicit ``student.init_checkpoint`` wins; otherwise one checkpoint per
    (student spec, seed) is kept under ``<out_dir>/students``.
    """
    if config.student.init_checkpoint is not None:
        return Path(config.student.init_checkpoint)
    tag = spec_hash(config.student.model)[:12]
    return Path(out_dir or config.out_dir) / "students" / f"student_fp_{tag}_s{seed}.qkdc"


def ensure_student_init(
    config: RunConfig,
    seed: int,
    *,
    out_dir: str | Path | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
    dataset_root=None,
) -> Path:
    """Pretrain the student in full precision unless its checkpoint already exists."""
    path = student_init_path(config, seed, out_dir)
    if path.exists():
        return path
    print(f"[train] role=student-pretrain seed={seed} path={path}")
    train_teacher(
        config, seed, path, model_spec=config.student.model, role="student-pretrain",
        datasets=datasets, dataset_root=dataset_root,
    )
    return path


def _kd_loss_fn(teacher: TeacherNetwork | None, cache: TeacherLogitsCache | None, distill, policy) -> LossFn:
    def loss_fn(logits: Tensor, batch: Batch, step: int) -> tuple[Tensor, float]:
        lam = policy.value(step)
        if teacher is None:
            t_logits = None
        elif cache is not None:
            t_logits = cache.lookup(batch.indices)
        else:
            t_logits = teacher.logits(batch.images)
        loss = kd_loss(logits, t_logits, batch.labels, distill.tau, lam, distill.tau_squared_scaling)
        return loss, lam

    return loss_fn


def _open_teacher(path: str | None, mode, train: Dataset, student: ModelSpec) -> TeacherNetwork:
    if path is None:
        raise ConfigError("teacher.checkpoint is required unless the lambda policy is constant(0)")
    if not Path(path).exists():
        raise ConfigError(f"teacher checkpoint not found: {path}")
    teacher = TeacherNetwork.from_checkpoint(path, mode)
    _check_compatible(teacher.model.spec, train, f"teacher {path}")
    if teacher.model.spec.num_classes != student.num_classes:
        raise ConfigError("teacher and student disagree on the number of classes")
    return teacher


def _distill_into(
    model: Network,
    config: RunConfig,
    seed: int,
    epochs: int,
    teacher: TeacherNetwork | None,
    distill,
    quant_spec: QuantizerSpec | None,
    train: Dataset,
    test: Dataset,
    hooks: TrainerHooks | None,
    role: str,
) -> tuple[Trainer, WeightQuantizer | None]:
    cache = None
    if teacher is not None and distill.cache_teacher_logits:
        if config.dataset.augment:
            raise ConfigError("teacher logits cannot be cached when augmentation is on")
        cache = TeacherLogitsCache(teacher, train.images)
    steps = epochs * math.ceil(len(train) / config.optimizer.batch_size)
    policy = distill.lambda_policy.bind(steps)
    quantizer = WeightQuantizer(model, quant_spec) if quant_spec is not None else None
    trainer = Trainer(
        model, config, epochs, seed, _kd_loss_fn(teacher, cache, distill, policy), quantizer=quantizer, hooks=hooks, role=role
    )
    print(
        f"[distill] role={role} tau={distill.tau:g} lambda={policy.label} steps={steps} "
        f"teacher={'none' if teacher is None else teacher.source} bits={None if quant_spec is None else quant_spec.bits}"
    )
    trainer.fit(train, test)
    return trainer, quantizer


def train_assistant(
    config: RunConfig,
    seed: int,
    *,
    datasets: tuple[Dataset, Dataset] | None = None,
    dataset_root=None,
    dtype=np.float32,
) -> ckpt_io.Checkpoint:
    """Distill the teacher assistant from the large teacher and save it as the student's teacher."""
    assistant: AssistantConfig | None = config.teacher.assistant
    if assistant is None:
        raise ConfigError("teacher.assistant is not configured")
    train, test = _datasets(config, datasets, dataset_root)
    _check_compatible(assistant.model, train, "assistant")
    teacher = _open_teacher(config.teacher.checkpoint, config.teacher.mode, train, assistant.model)
    model = build(assistant.model, seed, dtype)
    trainer, quantizer = _distill_into(
        model, config, seed, assistant.epochs, teacher, assistant.distill, assistant.quantizer, train, test, None, "assistant"
    )
    overrides = quantizer.materialize() if quantizer is not None else None
    meta = {"role": "assistant", "seed": seed, "teacher": config.teacher.checkpoint, **_history_metadata(trainer.history)}
    path = ckpt_io.save(model, assistant.checkpoint, metadata=meta, overrides=overrides)
    return ckpt_io.load(path)


def _effective_teacher_path(config: RunConfig, seed: int, datasets, dataset_root) -> str | None:
    assistant = config.teacher.assistant
    if assistant is None:
        return config.teacher.checkpoint
    if not Path(assistant.checkpoint).exists():
        train_assistant(config, seed, datasets=datasets, dataset_root=dataset_root)
    return assistant.checkpoint


def _soft_label_snapshot(teacher: TeacherNetwork | None, train: Dataset, tau: float) -> dict | None:
    if teacher is None:
        return None
    subset = train.head(SNAPSHOT_EXAMPLES)
    logits = teacher.logits(subset.images)
    at_tau = soft_label_stats(logits, tau)
    at_one = soft_label_stats(logits, 1.0)
    return {
        "tau": float(tau),
        "mean_entropy": at_tau.mean_entropy,
        "mean_peak": at_tau.mean_peak,
        "mean_entropy_tau1": at_one.mean_entropy,
        "examples": len(subset),
    }


def run_labels(config: RunConfig, teacher_width: float | None = None) -> dict:
    return {
        "tau": float(config.distill.tau),
        "lambda_policy": config.distill.lambda_policy.label,
        "bits": config.quantizer.bits,
        "width_factor": teacher_width,
        "teacher_mode": config.teacher.mode.label,
        "baseline": config.hard_only,
    }


def train_student_kd(
    config: RunConfig,
    seed: int,
    *,
    hooks: TrainerHooks | None = None,
    datasets: tuple[Dataset, Dataset] | None = None,
    dataset_root=None,
    out_path: str | Path | None = None,
    labels: dict | None = None,
    init_dir: str | Path | None = None,
    dtype=np.float32,
) -> RunRecord:
    """Quantization-aware fine-tuning of the student under the configured KD loss.

    The student always starts from a full-precision pretrained checkpoint,
    which is trained first when it does not exist yet.
    """
    started_at = arrow.utcnow().isoformat()
    t0 = time.perf_counter()
    train, test = _datasets(config, datasets, dataset_root)
    spec = config.student.model
    _check_compatible(spec, train, "student")

    model = build(spec, seed, dtype)
    teacher = None
    if not config.hard_only:
        path = _effective_teacher_path(config, seed, (train, test), dataset_root)
        teacher = _open_teacher(path, config.teacher.mode, train, spec)

    record = RunRecord(
        config_hash=config.config_hash(),
        seed=seed,
        status="ok",
        started_at=started_at,
        labels=labels or run_labels(config),
    )
    try:
        init = ensure_student_init(config, seed, out_dir=init_dir, datasets=(train, test), dataset_root=dataset_root)
        restore(model, ckpt_io.load(init))
        trainer, quantizer = _distill_into(
            model, config, seed, config.optimizer.student_epochs, teacher, config.distill, config.quantizer,
            train, test, hooks, "student",
        )
    except NonFiniteLossError as exc:
        record.status = "failed"
        record.diagnostic = {"error": "non-finite-loss", "message": str(exc), "epoch": exc.epoch, "step": exc.step}
        record.wall_time_s = time.perf_counter() - t0
        print(f"[train] role=student status=failed seed={seed} epoch={exc.epoch} step={exc.step}")
        return record

    record.epochs = [asdict(s) for s in trainer.history]
    if trainer.history:
        record.final_train_accuracy = trainer.history[-1].train_accuracy
        record.final_test_accuracy = trainer.history[-1].test_accuracy
    record.soft_labels = _soft_label_snapshot(teacher, train, config.distill.tau)
    if out_path is not None:
        meta = {"role": "student", "seed": seed, "config_hash": record.config_hash, **_history_metadata(trainer.history)}
        ckpt_io.save(model, out_path, metadata=meta, overrides=quantizer.materialize())
    record.wall_time_s = time.perf_counter() - t0
    return record
