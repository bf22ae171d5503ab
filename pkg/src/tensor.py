"""Dense tensors with eager reverse-mode automatic differentiation.

Each op is a ``Function`` subclass: ``forward`` works on raw numpy arrays and
may stash what it needs on ``self``; ``backward`` maps the output gradient to
one gradient per parent (``None`` for parents that take none).  Calling
``Tensor.backward`` builds a ``Tape`` (topological order of the graph that
produced the tensor) and walks it once in reverse.

Broadcasting is limited to three documented cases: identical shapes, a
size-1 operand, and a 1-D operand matching the trailing dimension of the
other (a bias row).  Anything else raises ``DimensionError``.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

DEFAULT_DTYPE = np.float32
LOG_FLOOR = 1e-12
DISTRIBUTION_ATOL = 1e-5

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, _ctx: Function | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.data.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")
        Tape.from_output(self).backward(self, grad)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class Tape:
    """Ordered record of the tensors reachable from an output.

    Every node appears after all of its inputs; ``backward`` visits each node
    exactly once, in reverse.
    """

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in reversed(node._ctx.parents):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node._ctx.backward(grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


class Function:
    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        for parent in parents:
            if not isinstance(parent, Tensor):
                raise TypeError(f"{cls.__name__} expects Tensor inputs, got {type(parent).__name__}")
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        needs_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=needs_grad, _ctx=fn if needs_grad else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return shape == () or shape == (1,)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if _is_scalar_shape(b):
        return a
    if _is_scalar_shape(a):
        return b
    if len(b) == 1 and a[-1:] == b:
        return a
    if len(a) == 1 and b[-1:] == a:
        return b
    raise DimensionError(f"shapes {a} and {b} are not compatible (supported: equal, scalar, trailing bias)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape):
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    return grad.reshape(-1, shape[0]).sum(axis=0)


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, x, *, factor: float):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul needs [m,k]·[k,n], got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x, *, axis=None, keepdims: bool = False):
        self.in_shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Reshape(Function):
    def forward(self, x, *, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Conv2d(Function):
    """Cross-correlation of ``x[N,C,H,W]`` with ``k[F,C,Kh,Kw]``."""

    def forward(self, x, k, *, stride: int, pad: int):
        if x.ndim != 4 or k.ndim != 4:
            raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape} and {k.shape}")
        if x.shape[1] != k.shape[1]:
            raise DimensionError(f"input has {x.shape[1]} channels but kernel expects {k.shape[1]}")
        if stride < 1 or pad < 0:
            raise DimensionError(f"invalid stride={stride} pad={pad}")
        _, _, h, w = x.shape
        _, _, kh, kw = k.shape
        out_h = (h + 2 * pad - kh) // stride + 1
        out_w = (w + 2 * pad - kw) // stride + 1
        if h + 2 * pad < kh or w + 2 * pad < kw or out_h < 1 or out_w < 1:
            raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad={pad}")
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        self.x_shape = x.shape
        self.xp_shape = xp.shape
        self.windows = windows
        self.k = k
        self.stride = stride
        self.pad = pad
        self.out_hw = (out_h, out_w)
        out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        k = self.k
        s = self.stride
        out_h, out_w = self.out_hw
        dk = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        _, _, kh, kw = k.shape
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += contrib
        p = self.pad
        dx = dxp[:, :, p : p + self.x_shape[2], p : p + self.x_shape[3]] if p else dxp
        return np.ascontiguousarray(dx), dk.astype(k.dtype, copy=False)


class BatchNorm(Function):
    """Per-channel normalization followed by an affine map.

    Channels are axis 1; statistics reduce over every other axis.  In training
    mode the batch statistics are used and the running buffers updated in
    place; in eval mode the running buffers are used.
    """

    def forward(self, x, gamma, beta, *, running_mean, running_var, training: bool, momentum: float, eps: float):
        if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(f"batch_norm expects [N,C] or [N,C,H,W] with C-sized affine, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        else:
            mean, var = running_mean, running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self.training = training
        self.axes = axes
        self.bshape = bshape
        self.xhat = xhat
        self.inv_std = inv_std.astype(x.dtype, copy=False)
        self.gamma = gamma
        return (xhat * gamma.reshape(bshape) + beta.reshape(bshape)).astype(x.dtype, copy=False)

    def backward(self, grad):
        axes, bshape = self.axes, self.bshape
        dgamma = (grad * self.xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma.reshape(bshape)
        inv_std = self.inv_std.reshape(bshape)
        if not self.training:
            return dxhat * inv_std, dgamma, dbeta
        m = grad.size // grad.shape[1]
        sum_dxhat = dxhat.sum(axis=axes).reshape(bshape)
        sum_dxhat_xhat = (dxhat * self.xhat).sum(axis=axes).reshape(bshape)
        dx = (inv_std / m) * (m * dxhat - sum_dxhat - self.xhat * sum_dxhat_xhat)
        return dx, dgamma, dbeta


class Softmax(Function):
    def forward(self, z, *, tau: float):
        shifted = (z - z.max(axis=-1, keepdims=True)) / tau
        e = np.exp(shifted)
        self.p = e / e.sum(axis=-1, keepdims=True)
        self.tau = tau
        return self.p

    def backward(self, grad):
        p = self.p
        inner = (grad * p).sum(axis=-1, keepdims=True)
        return (p * (grad - inner) / self.tau,)


class CrossEntropy(Function):
    """Mean over rows of ``-sum(target * log(max(model, LOG_FLOOR)))``."""

    def forward(self, target, model):
        self.target = target
        self.clamped = np.maximum(model, LOG_FLOOR)
        self.above_floor = model >= LOG_FLOOR
        self.log_model = np.log(self.clamped)
        self.rows = target.shape[0] if target.ndim > 1 else 1
        return np.asarray(-(target * self.log_model).sum() / self.rows, dtype=model.dtype)

    def backward(self, grad):
        scale_ = grad / self.rows
        d_target = -self.log_model * scale_
        d_model = np.where(self.above_floor, -self.target / self.clamped, 0.0) * scale_
        return d_target.astype(self.target.dtype, copy=False), d_model.astype(self.clamped.dtype, copy=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, k, stride=int(stride), pad=int(pad))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not math.isfinite(tau) or tau <= 0:
        raise DomainError(f"temperature must be a positive finite number, got {tau}")
    return tau


def softmax_with_temperature(z: Tensor, tau: float = 1.0) -> Tensor:
    return Softmax.apply(z, tau=_check_tau(tau))


def softmax_array(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Tape-free softmax for analytics on raw logits."""
    tau = _check_tau(tau)
    z = np.asarray(z)
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_distribution(name: str, p: np.ndarray) -> None:
    if p.ndim not in (1, 2):
        raise DimensionError(f"{name} must be [C] or [N,C], got {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError(f"{name} has negative or non-finite entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > DISTRIBUTION_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise DomainError(f"{name} rows must sum to 1 (worst deviation {worst:.3g})")


def cross_entropy(p_target: Tensor, p_model: Tensor) -> Tensor:
    if p_target.shape != p_model.shape:
        raise DimensionError(f"target shape {p_target.shape} does not match model shape {p_model.shape}")
    _check_distribution("target", p_target.data)
    _check_distribution("model", p_model.data)
    return CrossEntropy.apply(p_target, p_model)


def one_hot(labels: Iterable[int] | np.ndarray, num_classes: int, dtype=DEFAULT_DTYPE) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be 1-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return Tensor(out)


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocities: Sequence[np.ndarray | None] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One SGD-with-momentum update; returns (new params, new velocities).

    ``d = g + weight_decay * w``, ``v = momentum * v + d``, ``w = w - lr * v``
    with ``v`` starting at zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    velocities = list(velocities) if velocities is not None else [None] * len(params)
    new_params: list[np.ndarray] = []
    new_velocities: list[np.ndarray] = []
    for w, g, v in zip(params, grads, velocities):
        if w.shape != g.shape:
            raise DimensionError(f"param shape {w.shape} does not match grad shape {g.shape}")
        d = g + weight_decay * w if weight_decay else g
        v = d if v is None else momentum * v + d
        new_params.append(w - lr * v)
        new_velocities.append(v)
    return new_params, new_velocities


class SGD:
    """Momentum SGD over named parameters, updating ``Tensor.data`` in place."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray | None] = {name: None for name in params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            (new_w,), (new_v,) = sgd_step(
                [p.data],
                [p.grad],
                lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                velocities=[self.velocity[name]],
            )
            p.data[...] = new_w
            self.velocity[name] = new_v


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


def lr_for_epoch(schedule: str, base_lr: float, epoch: int, total_epochs: int) -> float:
    if schedule == "cosine":
        return cosine_lr(base_lr, epoch, total_epochs)
    if schedule == "constant":
        return base_lr
    raise DomainError(f"unknown learning-rate schedule {schedule!r}")
