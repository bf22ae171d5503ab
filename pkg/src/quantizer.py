"""Symmetric weight quantizers, step-size policies and shadow-weight bookkeeping.

``binarize`` maps every weight to ``±Δ`` (sign(0) is +1).  ``quantize_b``
rounds ``|w|/Δ`` half-up, clamps at ``(M-1)/2`` levels per side with
``M = 2**bits - 1`` and restores the sign.  Training keeps full-precision
shadow weights; the forward pass sees their quantized image and the
straight-through estimator routes gradients back unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import minimize_scalar

from .env import debug_enabled
from .errors import DegenerateInputError, DimensionError, DomainError
from .tensor import Tensor

DeltaPolicy = Literal["l2-optimal", "stddev"]
DELTA_POLICIES = ("l2-optimal", "stddev")
DELTA_UPDATES = ("epoch", "step")

STDDEV_COEFFICIENTS = {1: 1.0, 2: 0.7, 3: 0.4}
GRID_POINTS = 1000
LOCAL_GRID_POINTS = 100
GOLDEN_TOL = 1e-4


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    delta_policy: DeltaPolicy = "l2-optimal"
    per_layer: bool = True
    exempt_first_last: bool = False
    delta_update: Literal["epoch", "step"] = "epoch"

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 1:
            raise DomainError(f"bits must be an integer >= 1, got {self.bits}")
        if self.delta_policy not in DELTA_POLICIES:
            raise DomainError(f"unknown delta_policy {self.delta_policy!r}; expected one of {DELTA_POLICIES}")
        if self.delta_update not in DELTA_UPDATES:
            raise DomainError(f"unknown delta_update {self.delta_update!r}; expected one of {DELTA_UPDATES}")

    @property
    def levels(self) -> int:
        """M = 2**bits - 1 (two levels for the binarizer)."""
        return 2 if self.bits == 1 else 2**self.bits - 1

    @property
    def max_level(self) -> int:
        """Largest integer multiple of Δ representable, (M-1)/2; 1 for bits=1."""
        return 1 if self.bits == 1 else (self.levels - 1) // 2

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "delta_policy": self.delta_policy,
            "per_layer": self.per_layer,
            "exempt_first_last": self.exempt_first_last,
            "delta_update": self.delta_update,
        }


def _unwrap(w) -> tuple[np.ndarray, bool]:
    if isinstance(w, Tensor):
        return w.data, True
    return np.asarray(w), False


def _wrap(out: np.ndarray, as_tensor: bool):
    return Tensor(out) if as_tensor else out


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not math.isfinite(delta) or delta <= 0:
        raise DomainError(f"step size must be positive and finite, got {delta}")
    return delta


def _binarize_array(w: np.ndarray, delta: float) -> np.ndarray:
    return np.where(w >= 0, delta, -delta).astype(w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64)


def _quantize_b_array(w: np.ndarray, max_level: int, delta: float) -> np.ndarray:
    w64 = np.asarray(w, dtype=np.float64)
    k = np.minimum(np.floor(np.abs(w64) / delta + 0.5), max_level)
    out = np.sign(w64) * k * delta
    dtype = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64
    return out.astype(dtype)


def binarize(w, delta: float):
    data, as_tensor = _unwrap(w)
    return _wrap(_binarize_array(data, _check_delta(delta)), as_tensor)


def quantize_b(w, spec: QuantizerSpec, delta: float):
    delta = _check_delta(delta)
    if spec.bits <= 1:
        return binarize(w, delta)
    data, as_tensor = _unwrap(w)
    return _wrap(_quantize_b_array(data, spec.max_level, delta), as_tensor)


def quantize(w, spec: QuantizerSpec, delta: float):
    if spec.bits == 1:
        return binarize(w, delta)
    return quantize_b(w, spec, delta)


def level_set(spec: QuantizerSpec, delta: float) -> np.ndarray:
    delta = _check_delta(delta)
    if spec.bits == 1:
        return np.array([-delta, delta])
    k = np.arange(-spec.max_level, spec.max_level + 1, dtype=np.float64)
    return k * delta


def _magnitudes(w) -> np.ndarray:
    data, _ = _unwrap(w)
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DegenerateInputError("cannot choose a step size for an empty weight vector")
    if not np.all(np.isfinite(flat)):
        raise DomainError("weights contain non-finite values")
    return flat


def compute_delta_stddev(w, bits: int) -> float:
    flat = _magnitudes(w)
    sigma = float(np.std(flat))
    if sigma == 0.0:
        raise DegenerateInputError("weight vector has zero variance")
    if bits in STDDEV_COEFFICIENTS:
        return STDDEV_COEFFICIENTS[bits] * sigma
    return 6.0 * sigma / (2**bits - 2)


def quantization_residual(w, bits: int, delta: float) -> float:
    """Squared L2 distance ``||w - Q(w)||**2`` in float64."""
    flat = _magnitudes(w)
    delta = _check_delta(delta)
    if bits == 1:
        q = _binarize_array(flat, delta)
    else:
        q = _quantize_b_array(flat, 2 ** (bits - 1) - 1, delta)
    return float(np.sum((flat - q) ** 2))


def l2_search_bracket(w, bits: int) -> tuple[float, float]:
    flat = _magnitudes(w)
    top = float(np.max(np.abs(flat)))
    max_level = 1 if bits == 1 else 2 ** (bits - 1) - 1
    return top / (10.0 * max_level), 2.0 * top


def compute_delta_l2(w, spec: QuantizerSpec) -> float:
    """Step size minimizing the squared quantization error.

    Binarization has the closed form ``mean(|w|)``.  Otherwise a coarse
    grid over the search bracket locates the basin, golden-section search
    refines it, and a fine local grid around the best coarse point
    guards against the refinement leaving the basin.  The result is never
    worse than any coarse grid point.
    """
    flat = _magnitudes(w)
    if float(np.std(flat)) == 0.0:
        raise DegenerateInputError("weight vector has zero variance")
    if spec.bits == 1:
        # sum((|w| - Δ)**2) is minimized at mean(|w|)
        return float(np.mean(np.abs(flat)))
    lo, hi = l2_search_bracket(flat, spec.bits)

    def objective(delta: float) -> float:
        if delta <= 0:
            return math.inf
        return quantization_residual(flat, spec.bits, delta)

    grid = np.linspace(lo, hi, GRID_POINTS)
    residuals = np.array([objective(d) for d in grid])
    i = int(np.argmin(residuals))
    best_delta, best_res = float(grid[i]), float(residuals[i])

    left = float(grid[max(i - 1, 0)])
    right = float(grid[min(i + 1, GRID_POINTS - 1)])
    if 0 < i < GRID_POINTS - 1:
        try:
            refined = minimize_scalar(objective, bracket=(left, best_delta, right), method="golden", tol=GOLDEN_TOL)
            if refined.success or np.isfinite(refined.fun):
                if float(refined.fun) < best_res and float(refined.x) > 0:
                    best_delta, best_res = float(refined.x), float(refined.fun)
        except ValueError:
            pass
    for d in np.linspace(left, right, LOCAL_GRID_POINTS):
        r = objective(float(d))
        if r < best_res:
            best_delta, best_res = float(d), r
    return best_delta


def compute_delta(w, spec: QuantizerSpec) -> float:
    if spec.delta_policy == "stddev":
        return compute_delta_stddev(w, spec.bits)
    return compute_delta_l2(w, spec)


def ste_backward(grad_wq, w_full=None) -> np.ndarray:
    """Straight-through estimator: the gradient w.r.t. w_q is applied to w_full unchanged."""
    grad, _ = _unwrap(grad_wq)
    if w_full is not None:
        full, _ = _unwrap(w_full)
        if grad.shape != full.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match shadow weight shape {full.shape}")
    return np.array(grad, copy=True)


@dataclass
class ShadowPair:
    """A layer's full-precision master weights and their quantized image."""

    name: str
    w_full: Tensor
    w_q: Tensor | None = None
    delta: float | None = None


@dataclass
class WeightQuantizer:
    """Drives the quantize-forward / full-precision-update cycle for one model.

    The model must expose ``weight_layers()`` returning ``(name, layer)``
    pairs in forward order, each layer carrying a ``weight`` Tensor and a
    ``weight_q`` slot the layer reads in place of ``weight`` when set.
    """

    model: object
    spec: QuantizerSpec
    pairs: list[ShadowPair] = field(init=False)
    _layers: dict = field(init=False, repr=False)

    def __post_init__(self):
        layers = list(self.model.weight_layers())
        if self.spec.exempt_first_last and len(layers) > 2:
            layers = layers[1:-1]
        elif self.spec.exempt_first_last:
            layers = []
        self._layers = dict(layers)
        self.pairs = [ShadowPair(name, layer.weight) for name, layer in layers]

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.pairs]

    def update_deltas(self) -> dict[str, float]:
        if not self.pairs:
            return {}
        if self.spec.per_layer:
            for pair in self.pairs:
                pair.delta = compute_delta(pair.w_full.data, self.spec)
        else:
            shared = compute_delta(np.concatenate([p.w_full.data.ravel() for p in self.pairs]), self.spec)
            for pair in self.pairs:
                pair.delta = shared
        deltas = {p.name: float(p.delta) for p in self.pairs}
        if debug_enabled():
            for name, delta in deltas.items():
                print(f"[quant] delta layer={name} bits={self.spec.bits} policy={self.spec.delta_policy} delta={delta:.6g}")
        return deltas

    def quantize(self) -> None:
        """Regenerate w_q = Q(w_full) for every pair and install it on its layer."""
        if self.spec.delta_update == "step" or any(p.delta is None for p in self.pairs):
            self.update_deltas()
        for pair in self.pairs:
            wq = quantize(pair.w_full.data, self.spec, pair.delta)
            pair.w_q = Tensor(wq, requires_grad=True)
            self._layers[pair.name].weight_q = pair.w_q

    def apply_ste(self) -> None:
        for pair in self.pairs:
            if pair.w_q is None or pair.w_q.grad is None:
                continue
            pair.w_full.grad = ste_backward(pair.w_q.grad, pair.w_full)

    def materialize(self) -> dict[str, np.ndarray]:
        """Quantized weights keyed by layer name, ready for checkpointing."""
        if any(p.delta is None for p in self.pairs):
            self.update_deltas()
        return {p.name: quantize(p.w_full.data, self.spec, p.delta) for p in self.pairs}

    def deltas(self) -> dict[str, float]:
        return {p.name: float(p.delta) for p in self.pairs if p.delta is not None}

    def release(self) -> None:
        """Detach quantized views so the model runs on its full-precision weights."""
        for pair in self.pairs:
            pair.w_q = None
            self._layers[pair.name].weight_q = None
