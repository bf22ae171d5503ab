"""Width-scalable classifier families.

Two families share one layer plan so that ``param_count`` and ``build`` can
never disagree:

- ``mlp``: ``depth`` hidden Linear+ReLU layers of ``round(base_width * N)``
  units (base 64) then a linear head.  Depth 0 is a linear classifier.
- ``smallconv``: ``depth`` blocks of 3x3 conv (no bias) + BatchNorm + ReLU
  with ``round(base_width * N * 2**i)`` channels (base 8) and strides
  1, 2, 2, ..., then global average pooling and a linear head.

Initialization is He-uniform (bound ``sqrt(6 / fan_in)``) for conv and
linear weights, zero biases, unit/zero BatchNorm affine parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

Family = Literal["mlp", "smallconv"]
FAMILY_DEFAULTS = {
    "mlp": {"base_width": 64, "depth": 2, "batch_norm": False},
    "smallconv": {"base_width": 8, "depth": 3, "batch_norm": True},
}


def scaled_width(base: int, factor: float) -> int:
    return max(1, int(math.floor(base * factor + 0.5)))


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    width_factor: float = 1.0
    depth: int | None = None
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 28, 28)
    base_width: int | None = None
    residual: bool = False
    batch_norm: bool | None = None

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {sorted(FAMILY_DEFAULTS)}")
        defaults = FAMILY_DEFAULTS[self.family]
        for key in ("depth", "base_width", "batch_norm"):
            if getattr(self, key) is None:
                object.__setattr__(self, key, defaults[key])
        object.__setattr__(self, "width_factor", float(self.width_factor))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not math.isfinite(self.width_factor) or self.width_factor <= 0:
            raise ConfigError(f"width_factor must be positive, got {self.width_factor}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (C, H, W) with positive dims, got {self.input_shape}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        min_depth = 0 if self.family == "mlp" else 1
        if self.depth < min_depth:
            raise ConfigError(f"{self.family} depth must be >= {min_depth}, got {self.depth}")
        if self.residual and self.family != "smallconv":
            raise ConfigError("residual blocks are only available for the smallconv family")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "width_factor": self.width_factor,
            "depth": self.depth,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "base_width": self.base_width,
            "residual": self.residual,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModelSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        if "family" not in data:
            raise ConfigError("model spec is missing 'family'")
        kwargs = dict(data)
        if "input_shape" in kwargs:
            kwargs["input_shape"] = tuple(kwargs["input_shape"])
        return cls(**kwargs)


def spec_hash(spec: ModelSpec) -> str:
    canonical = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LayerPlan:
    kind: Literal["linear", "conv", "bn"]
    name: str
    fan_in: int
    fan_out: int
    stride: int = 1
    bias: bool = True


def layer_plan(spec: ModelSpec) -> list[LayerPlan]:
    plan: list[LayerPlan] = []
    c, h, w = spec.input_shape
    if spec.family == "mlp":
        width_in = c * h * w
        hidden = scaled_width(spec.base_width, spec.width_factor)
        for i in range(spec.depth):
            plan.append(LayerPlan("linear", f"fc{i}", width_in, hidden))
            if spec.batch_norm:
                plan.append(LayerPlan("bn", f"fc{i}.bn", hidden, hidden))
            width_in = hidden
        plan.append(LayerPlan("linear", "head", width_in, spec.num_classes))
        return plan
    channels_in = c
    for i in range(spec.depth):
        channels = scaled_width(spec.base_width, spec.width_factor * 2**i)
        stride = 1 if i == 0 else 2
        plan.append(LayerPlan("conv", f"block{i}.conv", channels_in, channels, stride=stride, bias=False))
        if spec.batch_norm:
            plan.append(LayerPlan("bn", f"block{i}.bn", channels, channels))
        if spec.residual:
            plan.append(LayerPlan("conv", f"block{i}.conv2", channels, channels, bias=False))
            if spec.batch_norm:
                plan.append(LayerPlan("bn", f"block{i}.bn2", channels, channels))
        channels_in = channels
    plan.append(LayerPlan("linear", "head", channels_in, spec.num_classes))
    return plan


def _plan_params(item: LayerPlan) -> int:
    if item.kind == "linear":
        return item.fan_in * item.fan_out + (item.fan_out if item.bias else 0)
    if item.kind == "conv":
        return item.fan_in * item.fan_out * 9
    return 2 * item.fan_out


def param_count(spec: ModelSpec) -> int:
    """Exact number of trainable scalars (BatchNorm running statistics excluded)."""
    return sum(_plan_params(item) for item in layer_plan(spec))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype, bias: bool = True):
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True) if bias else None
        self.weight_q: Tensor | None = None

    def effective_weight(self) -> Tensor:
        return self.weight_q if self.weight_q is not None else self.weight

    def parameters(self) -> dict[str, Tensor]:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.effective_weight())
        return y + self.bias if self.bias is not None else y


class Conv2d:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype, stride: int = 1):
        bound = math.sqrt(6.0 / (fan_in * 9))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in, 3, 3)).astype(dtype), requires_grad=True)
        self.stride = stride
        self.weight_q: Tensor | None = None

    def effective_weight(self) -> Tensor:
        return self.weight_q if self.weight_q is not None else self.weight

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), stride=self.stride, pad=1)


class BatchNorm:
    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )


@dataclass
class Network:
    spec: ModelSpec
    layers: dict[str, Linear | Conv2d | BatchNorm] = field(default_factory=dict)
    training: bool = True

    def train(self) -> Network:
        self.training = True
        return self

    def eval(self) -> Network:
        self.training = False
        return self

    def weight_layers(self) -> Iterator[tuple[str, Linear | Conv2d]]:
        for name, layer in self.layers.items():
            if isinstance(layer, (Linear, Conv2d)):
                yield name, layer

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{name}.{pname}": p for name, layer in self.layers.items() for pname, p in layer.parameters().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{bname}": b
            for name, layer in self.layers.items()
            if isinstance(layer, BatchNorm)
            for bname, b in layer.buffers().items()
        }

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def _bn(self, name: str, x: Tensor) -> Tensor:
        layer = self.layers.get(name)
        return layer(x, self.training) if layer is not None else x

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        expected = self.spec.input_shape
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ConfigError(f"model expects inputs [N, {', '.join(map(str, expected))}], got {list(x.shape)}")
        if self.spec.family == "mlp":
            h = T.flatten(x)
            for i in range(self.spec.depth):
                h = T.relu(self._bn(f"fc{i}.bn", self.layers[f"fc{i}"](h)))
            return self.layers["head"](h)
        h = x
        for i in range(self.spec.depth):
            a = self._bn(f"block{i}.bn", self.layers[f"block{i}.conv"](h))
            if self.spec.residual:
                b = self._bn(f"block{i}.bn2", self.layers[f"block{i}.conv2"](T.relu(a)))
                a = a + b
            h = T.relu(a)
        pooled = T.mean(h, axis=(2, 3))
        return self.layers["head"](pooled)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for a stack of images without recording a tape."""
        chunks = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                batch = Tensor(images[start : start + batch_size], dtype=self.dtype)
                chunks.append(self.forward(batch).data)
        if not chunks:
            return np.zeros((0, self.spec.num_classes), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    @property
    def dtype(self):
        return next(iter(self.named_parameters().values())).dtype


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Network:
    rng = np.random.default_rng(seed)
    model = Network(spec)
    for item in layer_plan(spec):
        if item.kind == "linear":
            model.layers[item.name] = Linear(item.fan_in, item.fan_out, rng, dtype, bias=item.bias)
        elif item.kind == "conv":
            model.layers[item.name] = Conv2d(item.fan_in, item.fan_out, rng, dtype, stride=item.stride)
        else:
            model.layers[item.name] = BatchNorm(item.fan_out, dtype)
    return model


def restore(model: Network, checkpoint) -> Network:
    """Copy a loaded checkpoint's tensors into ``model`` after a spec-hash check."""
    expected = spec_hash(model.spec)
    if checkpoint.spec_hash != expected:
        raise ConfigError(
            f"checkpoint spec hash {checkpoint.spec_hash[:12]} does not match model spec hash {expected[:12]}"
        )
    params = model.named_parameters()
    buffers = model.named_buffers()
    missing = (set(params) - set(checkpoint.params)) | (set(buffers) - set(checkpoint.buffers))
    if missing:
        raise ConfigError(f"checkpoint is missing tensors: {sorted(missing)}")
    for name, p in params.items():
        src = checkpoint.params[name]
        if src.shape != p.shape:
            raise ConfigError(f"tensor {name} has shape {src.shape}, model expects {p.shape}")
        p.data[...] = src
    for name, b in buffers.items():
        b[...] = checkpoint.buffers[name]
    return model


def from_checkpoint(checkpoint, dtype=np.float32) -> Network:
    spec = ModelSpec.from_dict(checkpoint.spec)
    return restore(build(spec, seed=0, dtype=dtype), checkpoint).eval()
