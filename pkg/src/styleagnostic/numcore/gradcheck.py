"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """Elementwise central differences of scalar ``fn()`` w.r.t. ``tensor.data``."""
    base = tensor.data
    out = np.zeros(base.shape, dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[i] += h
        minus = base.copy()
        minus.reshape(-1)[i] -= h
        with no_grad():
            tensor.data = plus
            fp = fn().item()
            tensor.data = minus
            fm = fn().item()
        flat[i] = (fp - fm) / (2 * h)
    tensor.data = base
    return out


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list:
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss, wrt=tensors)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4) -> list:
    """Relative error per tensor between backward() and elementwise central differences."""
    analytic = analytic_grads(fn, tensors)
    return [relative_error(a, numeric_grad(fn, t, h)) for a, t in zip(analytic, tensors)]


def check_directional(fn: Callable[[], Tensor], tensors: Sequence[Tensor], rng: np.random.Generator,
                      n_directions: int = 3, h: float = 1e-4) -> float:
    """Compare grad . v against (f(x + h v) - f(x - h v)) / 2h for random unit v.

    Covers all tensors at once, so it scales to networks where the
    elementwise check would need thousands of forward passes. Returns the
    worst relative error over directions.
    """
    analytic = analytic_grads(fn, tensors)
    bases = [t.data for t in tensors]
    worst = 0.0
    for _ in range(n_directions):
        dirs = [rng.standard_normal(t.shape) for t in tensors]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        proj = sum(float((a * d).sum()) for a, d in zip(analytic, dirs))
        with no_grad():
            for t, b, d in zip(tensors, bases, dirs):
                t.data = (b + h * d).astype(b.dtype)
            fp = fn().item()
            for t, b, d in zip(tensors, bases, dirs):
                t.data = (b - h * d).astype(b.dtype)
            fm = fn().item()
        for t, b in zip(tensors, bases):
            t.data = b
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(np.array([proj]), np.array([numeric])))
    return worst
