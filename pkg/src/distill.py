"""Knowledge-distillation loss, λ schedules and soft-label analytics.

The loss mixes a hard term against the one-hot labels (student softmax at
τ=1) with a soft term against the teacher's tempered distribution:

    L = (1 - λ) * CE(onehot(y), softmax(z_S)) + λ * CE(softmax(z_T/τ), softmax(z_S/τ))

Teacher logits never receive gradient.  With λ=0 the soft term contributes
exactly zero, so the value and gradients equal plain hard-label training.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
import pandas as pd

from . import tensor as T
from .checkpoint import Checkpoint, load
from .errors import ConfigError, DimensionError, DomainError
from .models import Network, from_checkpoint
from .quantizer import DELTA_POLICIES, QuantizerSpec, WeightQuantizer
from .tensor import Tensor


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (0.0 <= lam <= 1.0):
        raise DomainError(f"loss weight λ must lie in [0, 1], got {lam}")
    return lam


def gslr_lambda(step: int, lambda0: float = 0.5, horizon: int = 1) -> float:
    """Linearly decayed soft-loss weight: ``lambda0 * max(0, 1 - step/horizon)``."""
    if horizon <= 0:
        raise DomainError(f"GSLR horizon must be positive, got {horizon}")
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    lambda0 = _check_lambda(lambda0)
    return lambda0 * max(0.0, 1.0 - step / horizon)


class LambdaPolicy(Protocol):
    def value(self, step: int) -> float: ...

    def bind(self, total_steps: int) -> LambdaPolicy: ...

    def to_dict(self) -> dict: ...

    @property
    def label(self) -> str: ...


@dataclass(frozen=True)
class ConstantLambda:
    lam: float

    def __post_init__(self):
        _check_lambda(self.lam)

    def value(self, step: int) -> float:
        return float(self.lam)

    def bind(self, total_steps: int) -> ConstantLambda:
        return self

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": float(self.lam)}

    @property
    def label(self) -> str:
        return f"constant({self.lam:g})"

    @property
    def is_hard_only(self) -> bool:
        return self.lam == 0.0


@dataclass(frozen=True)
class GslrLambda:
    lambda0: float
    horizon_steps: int | Literal["auto"] = "auto"

    def __post_init__(self):
        _check_lambda(self.lambda0)
        if self.horizon_steps != "auto" and int(self.horizon_steps) <= 0:
            raise DomainError(f"GSLR horizon must be positive, got {self.horizon_steps}")

    def value(self, step: int) -> float:
        if self.horizon_steps == "auto":
            raise DomainError("GSLR horizon is 'auto' and has not been bound to a run length")
        return gslr_lambda(step, self.lambda0, int(self.horizon_steps))

    def bind(self, total_steps: int) -> GslrLambda:
        if self.horizon_steps != "auto":
            return self
        return GslrLambda(self.lambda0, max(1, int(total_steps)))

    def to_dict(self) -> dict:
        return {"kind": "gslr", "lambda0": float(self.lambda0), "horizon_steps": self.horizon_steps}

    @property
    def label(self) -> str:
        return f"gslr({self.lambda0:g})"

    @property
    def is_hard_only(self) -> bool:
        return self.lambda0 == 0.0


def lambda_policy_from_dict(data: dict) -> ConstantLambda | GslrLambda:
    kind = data.get("kind")
    try:
        if kind == "constant":
            return ConstantLambda(float(data["value"]))
        if kind == "gslr":
            if "lambda0" not in data:
                raise ConfigError("gslr lambda policy needs an explicit lambda0")
            return GslrLambda(float(data["lambda0"]), data.get("horizon_steps", "auto"))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown lambda policy kind {kind!r}")


def hard_label_loss(logits_s: Tensor, y) -> Tensor:
    """Cross-entropy of the student's τ=1 softmax against one-hot labels."""
    targets = T.one_hot(y, logits_s.shape[-1], dtype=logits_s.dtype)
    return T.cross_entropy(targets, T.softmax_with_temperature(logits_s, 1.0))


def kd_loss(
    logits_s: Tensor,
    logits_t: Tensor | np.ndarray | None,
    y,
    tau: float,
    lam: float,
    tau_squared_scaling: bool = False,
) -> Tensor:
    lam = _check_lambda(lam)
    if not math.isfinite(float(tau)) or tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    hard = hard_label_loss(logits_s, y)
    if logits_t is None:
        if lam != 0.0:
            raise ConfigError("teacher logits are required when λ > 0")
        return T.scale(hard, 1.0)
    teacher = logits_t.detach() if isinstance(logits_t, Tensor) else Tensor(np.asarray(logits_t, dtype=logits_s.dtype))
    if teacher.shape != logits_s.shape:
        raise DimensionError(f"teacher logits {teacher.shape} do not match student logits {logits_s.shape}")
    p_t = T.softmax_with_temperature(teacher, tau)
    soft = T.cross_entropy(p_t, T.softmax_with_temperature(logits_s, tau))
    if tau_squared_scaling:
        soft = T.scale(soft, float(tau) ** 2)
    return T.scale(hard, 1.0 - lam) + T.scale(soft, lam)


@dataclass(frozen=True)
class TeacherMode:
    kind: Literal["float", "quantized"] = "float"
    bits: int | None = None
    delta_policy: str | None = None

    def __post_init__(self):
        if self.kind not in ("float", "quantized"):
            raise ConfigError(f"unknown teacher mode {self.kind!r}")
        if self.delta_policy is not None and self.delta_policy not in DELTA_POLICIES:
            raise ConfigError(f"unknown teacher delta_policy {self.delta_policy!r}; expected one of {DELTA_POLICIES}")
        if self.kind == "quantized" and (self.bits is None or self.bits < 1):
            raise ConfigError("quantized teacher mode needs bits >= 1")
        if self.kind == "quantized" and self.delta_policy is None:
            raise ConfigError(f"quantized teacher mode needs an explicit delta_policy, one of {DELTA_POLICIES}")

    @property
    def label(self) -> str:
        return "float" if self.kind == "float" else f"quantized({self.bits})"


@dataclass
class TeacherNetwork:
    """A frozen, eval-mode teacher materialized from a checkpoint."""

    model: Network
    mode: TeacherMode = field(default_factory=TeacherMode)
    source: str = "<memory>"

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint | str | os.PathLike, mode: TeacherMode | None = None) -> TeacherNetwork:
        source = "<memory>"
        if not isinstance(checkpoint, Checkpoint):
            source = str(checkpoint)
            if not Path(checkpoint).exists():
                raise ConfigError(f"teacher checkpoint not found: {checkpoint}")
            checkpoint = load(checkpoint)
        mode = mode or TeacherMode()
        model = from_checkpoint(checkpoint)
        if mode.kind == "quantized":
            quantizer = WeightQuantizer(model, QuantizerSpec(bits=mode.bits, delta_policy=mode.delta_policy))
            quantizer.update_deltas()
            quantizer.quantize()
        return cls(model.eval(), mode, source)

    def logits(self, inputs) -> np.ndarray:
        images = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs)
        if images.ndim != 4 or tuple(images.shape[1:]) != self.model.spec.input_shape:
            raise ConfigError(
                f"teacher {self.source} expects inputs shaped {list(self.model.spec.input_shape)}, "
                f"got {list(images.shape[1:])}"
            )
        return self.model.predict(images)


def teacher_forward(checkpoint, inputs, mode: TeacherMode | None = None) -> np.ndarray:
    return TeacherNetwork.from_checkpoint(checkpoint, mode).logits(inputs)


class TeacherLogitsCache:
    """Raw teacher logits for a fixed (non-augmented) train set, indexed per batch."""

    def __init__(self, teacher: TeacherNetwork, images: np.ndarray):
        self.logits = teacher.logits(images)

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        return self.logits[indices]


@dataclass(frozen=True)
class SoftLabelStats:
    tau: float
    entropy: np.ndarray
    peak_prob: np.ndarray
    probabilities: np.ndarray
    labels: np.ndarray | None = None

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy))

    @property
    def mean_peak(self) -> float:
        return float(np.mean(self.peak_prob))


def soft_label_stats(logits_t, tau: float, labels=None) -> SoftLabelStats:
    z = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t)
    if z.ndim != 2:
        raise DimensionError(f"logits must be [N, C], got {z.shape}")
    if labels is not None and len(labels) != len(z):
        raise DimensionError(f"{len(labels)} labels for {len(z)} logit rows")
    p = T.softmax_array(np.asarray(z, dtype=np.float64), tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = np.clip(-plogp.sum(axis=1), 0.0, math.log(z.shape[1]))
    return SoftLabelStats(
        tau=float(tau),
        entropy=entropy,
        peak_prob=p.max(axis=1),
        probabilities=p,
        labels=None if labels is None else np.asarray(labels),
    )


def class_histogram(stats: SoftLabelStats, label: int) -> np.ndarray:
    """Mean teacher distribution over the examples whose true label is ``label``."""
    if stats.labels is None:
        raise DomainError("soft-label stats were computed without labels")
    mask = stats.labels == label
    if not mask.any():
        raise DomainError(f"no examples with label {label}")
    return stats.probabilities[mask].mean(axis=0)


def write_histogram_csv(stats: SoftLabelStats, path, label: int | None = None) -> Path:
    probs = stats.probabilities
    ids = np.arange(len(probs))
    if label is not None:
        if stats.labels is None:
            raise DomainError("soft-label stats were computed without labels")
        keep = stats.labels == label
        probs, ids = probs[keep], ids[keep]
    n, c = probs.shape
    frame = pd.DataFrame(
        {
            "example_id": np.repeat(ids, c),
            "class_id": np.tile(np.arange(c), n),
            "probability": probs.ravel(),
        }
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.8g", lineterminator="\n")
    return out


def write_summary_csv(rows: list[SoftLabelStats], path) -> Path:
    frame = pd.DataFrame(
        [{"tau": s.tau, "mean_entropy": s.mean_entropy, "mean_peak": s.mean_peak} for s in rows],
        columns=["tau", "mean_entropy", "mean_peak"],
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.8g", lineterminator="\n")
    return out
