#!/usr/bin/env python3
"""
Numerics Module
Dense float64 kernels with hand-written backward passes, the SGD optimizer
with warm-up/cosine schedule, and central finite-difference verification
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, LabelError, NonFiniteError, ScheduleError

FLOAT = np.float64
MODULE = "numerics"


def as_tensor(values) -> np.ndarray:
    """Convert array-like input to a contiguous float64 array"""
    return np.ascontiguousarray(values, dtype=FLOAT)


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    """Raise NonFiniteError if any entry of x is NaN or Inf"""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}", MODULE)
    return x


def _require_2d(x: np.ndarray, name: str):
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}", MODULE)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """Trainable array with its gradient and SGD momentum buffer"""

    value: np.ndarray
    gradient: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.gradient is None:
            self.gradient = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if not (self.value.shape == self.gradient.shape == self.momentum_buffer.shape):
            raise DimensionError("parameter value, gradient and momentum shapes differ", MODULE)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.gradient.fill(0.0)

    def accumulate(self, grad: np.ndarray):
        """Add grad into the gradient buffer (shapes must match)"""
        if grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match parameter {self.value.shape}", MODULE)
        self.gradient += grad


class ParameterSet:
    """Ordered registry of named parameters shared by every pipeline stage"""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise DimensionError(f"duplicate parameter name '{name}'", MODULE)
        param = Parameter(as_tensor(value))
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def subset(self, prefix: str) -> "ParameterSet":
        """View over the parameters whose names start with prefix"""
        view = ParameterSet()
        for name, param in self._params.items():
            if name.startswith(prefix):
                view._params[name] = param
        return view

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def num_values(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))

    def state(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.value.copy()) for name, p in self._params.items())


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m x k) and b (k x n)"""
    a, b = as_tensor(a), as_tensor(b)
    _require_2d(a, "left operand")
    _require_2d(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}", MODULE)
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dout: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of matmul with respect to both operands"""
    return dout @ b.T, a.T @ dout


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, evaluated without overflow"""
    x = as_tensor(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction"""
    x = as_tensor(x)
    _require_2d(x, "softmax input")
    if x.shape[1] < 1:
        raise DimensionError("softmax needs at least one column", MODULE)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return out * (dout - np.sum(dout * out, axis=1, keepdims=True))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def conv2d_same(frame: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with one pixel of zero padding (output shape = input shape)"""
    frame, kernel = as_tensor(frame), as_tensor(kernel)
    _require_2d(frame, "frame")
    if kernel.shape != (3, 3):
        raise DimensionError(f"kernel must be 3x3, got {kernel.shape}", MODULE)
    h, w = frame.shape
    padded = np.pad(frame, 1)
    out = np.zeros((h, w), dtype=FLOAT)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di:di + h, dj:dj + w]
    return out


def conv2d_same_backward(frame: np.ndarray, kernel: np.ndarray,
                         dout: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_same with respect to (frame, kernel)"""
    h, w = frame.shape
    padded = np.pad(frame, 1)
    dpadded = np.zeros_like(padded)
    dkernel = np.zeros((3, 3), dtype=FLOAT)
    for di in range(3):
        for dj in range(3):
            dkernel[di, dj] = np.sum(padded[di:di + h, dj:dj + w] * dout)
            dpadded[di:di + h, dj:dj + w] += kernel[di, dj] * dout
    return dpadded[1:-1, 1:-1], dkernel


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum of Huber terms: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}", MODULE)
    x = pred - target
    ax = np.abs(x)
    return float(np.sum(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)))


def smooth_l1_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of smooth_l1 with respect to pred"""
    x = as_tensor(pred) - as_tensor(target)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _single_label_indices(logits: np.ndarray, labels) -> np.ndarray:
    n, k = logits.shape
    if k < 2:
        raise DimensionError("single-label classification needs K >= 2", MODULE)
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape[0] != n:
        raise DimensionError(f"{idx.shape[0]} labels for {n} rows", MODULE)
    if np.any(idx < 0) or np.any(idx >= k):
        raise LabelError(f"label index outside 0..{k - 1}", MODULE)
    return idx


def _multi_label_targets(logits: np.ndarray, labels) -> np.ndarray:
    targets = as_tensor(labels)
    if targets.shape != logits.shape:
        raise DimensionError(f"multi-label targets {targets.shape} vs logits {logits.shape}", MODULE)
    if np.any((targets != 0.0) & (targets != 1.0)):
        raise LabelError("multi-label targets must be binary", MODULE)
    return targets


def classification_loss(logits: np.ndarray, labels, multi_label: bool = False) -> float:
    """
    Mean softmax cross-entropy (single-label) or mean per-class sigmoid
    binary cross-entropy (multi-label)

    Args:
        logits: n x K scores
        labels: n class indices, or an n x K binary matrix when multi_label
        multi_label: select the sigmoid objective

    Returns:
        float: loss value
    """
    loss, _ = classification_loss_with_grad(logits, labels, multi_label)
    return loss


def classification_loss_with_grad(logits: np.ndarray, labels,
                                  multi_label: bool = False) -> Tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to the logits"""
    logits = as_tensor(logits)
    _require_2d(logits, "logits")
    n, k = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if multi_label:
        targets = _multi_label_targets(logits, labels)
        per_entry = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
        grad = (sigmoid(logits) - targets) / (n * k)
        return float(per_entry.mean()), grad
    idx = _single_label_indices(logits, labels)
    logp = log_softmax_rows(logits)
    loss = -float(logp[np.arange(n), idx].mean())
    grad = np.exp(logp)
    grad[np.arange(n), idx] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class LrSchedule:
    """Linear warm-up from warmup_start_lr to base_lr, then cosine decay to 0"""

    base_lr: float = 0.001
    warmup_start_lr: float = 0.0001
    warmup_epochs: float = 0.3
    total_epochs: int = 10

    def __post_init__(self):
        if self.base_lr < 0 or self.warmup_start_lr < 0:
            raise ScheduleError("learning rates must be non-negative", MODULE)
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise ScheduleError("warm-up must be >= 0 and total_epochs > 0", MODULE)
        if self.warmup_epochs > self.total_epochs:
            raise ScheduleError("warm-up longer than training", MODULE)

    def lr(self, epoch_progress: float) -> float:
        if epoch_progress < 0:
            raise ScheduleError(f"epoch_progress must be >= 0, got {epoch_progress}", MODULE)
        t = min(float(epoch_progress), float(self.total_epochs))
        if t < self.warmup_epochs:
            frac = t / self.warmup_epochs
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * frac
        decay_span = self.total_epochs - self.warmup_epochs
        if decay_span <= 0:
            return 0.0
        frac = (t - self.warmup_epochs) / decay_span
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: Union[ParameterSet, Sequence[Parameter]], schedule: LrSchedule,
             epoch_progress: float, momentum: float = 0.9,
             weight_decay: float = 0.0001) -> float:
    """
    One SGD update with momentum and L2 weight decay

    Args:
        params: parameters whose gradients are populated
        schedule: learning-rate schedule
        epoch_progress: fractional epoch at which the step is taken
        momentum: momentum coefficient
        weight_decay: L2 coefficient folded into the gradient

    Returns:
        float: the learning rate used for this step
    """
    lr = schedule.lr(epoch_progress)
    items = params.values() if isinstance(params, ParameterSet) else params
    for param in items:
        check_finite(param.gradient, "gradient")
        step = param.gradient + weight_decay * param.value
        param.momentum_buffer *= momentum
        param.momentum_buffer += step
        param.value -= lr * param.momentum_buffer
    return lr


def clip_grad_norm(params: ParameterSet, max_norm: Optional[float]) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm; returns the original norm"""
    total = math.sqrt(sum(float(np.sum(p.gradient * p.gradient)) for p in params.values()))
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / total
        for p in params.values():
            p.gradient *= scale
    return total


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(objective: Callable[[bool], float],
                      params: Union[ParameterSet, Dict[str, Parameter]],
                      eps: float = 1e-5,
                      max_coords_per_param: Optional[int] = None,
                      rng_seed: int = 0,
                      atol: float = 1e-8) -> float:
    """
    Compare analytic gradients to central differences

    The objective is called once as objective(True), which must zero and
    populate every parameter gradient, then repeatedly as objective(False)
    for loss values only. Coordinates whose absolute discrepancy is at most
    atol count as exact (rounding noise of the central difference).

    Args:
        objective: deterministic scalar function of the parameter values
        params: parameters to perturb
        eps: perturbation size
        max_coords_per_param: sample at most this many coordinates per parameter
        rng_seed: seed for coordinate sampling
        atol: absolute discrepancy treated as zero

    Returns:
        float: worst relative error |a - n| / (|a| + |n| + 1e-8)
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = objective(True)
    if not math.isfinite(base):
        raise NonFiniteError("objective returned a non-finite value", MODULE)
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    for param in params.values():
        analytic = param.gradient.copy()
        flat = param.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + eps
            up = objective(False)
            flat[idx] = original - eps
            down = objective(False)
            flat[idx] = original
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError("objective returned a non-finite value", MODULE)
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[idx]
            diff = abs(a - numeric)
            if diff <= atol:
                continue
            worst = max(worst, diff / (abs(a) + abs(numeric) + 1e-8))
    return worst
