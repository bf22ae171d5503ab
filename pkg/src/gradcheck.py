"""Central finite-difference checks for the autodiff ops."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    target = inputs[index].data
    grad = np.zeros_like(target, dtype=np.float64)
    it = np.nditer(target, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        original = target[idx].copy()
        target[idx] = original + h
        plus = fn(*inputs).item()
        target[idx] = original - h
        minus = fn(*inputs).item()
        target[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.zero_grad()
    fn(*inputs).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm((analytic - numeric).ravel())
    denom = max(np.linalg.norm(analytic.ravel()) + np.linalg.norm(numeric.ravel()), 1e-12)
    return float(diff / denom)


def max_relative_error(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst norm-wise relative error over every input that requires grad.

    Inputs should be float64 for the error to be meaningful.
    """
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        worst = max(worst, relative_error(analytic[i], numerical_gradient(fn, inputs, i, h)))
    return worst
