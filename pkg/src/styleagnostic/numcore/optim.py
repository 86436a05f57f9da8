from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


def sgd_step(params: Iterable[Tensor], velocities: dict, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    ``velocities`` maps ``id(param)`` to its buffer and is updated in place.
    Parameter arrays are replaced rather than mutated, so graphs built before
    the step keep seeing the values they were computed with. Grads are left
    untouched.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        d = p.grad
        if weight_decay:
            d = d + weight_decay * p.data
        v = velocities.get(id(p))
        v = d if v is None or momentum == 0.0 else momentum * v + d
        velocities[id(p)] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)


class SGD:
    """Stateful wrapper over :func:`sgd_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("duplicate parameters in optimizer")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        sgd_step(self.params, self.velocities, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)


def cosine_lr(base_lr: float, iteration: int, total_iters: int) -> float:
    """Cosine decay from ``base_lr`` at iteration 0 towards 0 at ``total_iters``."""
    if total_iters <= 0:
        return base_lr
    t = min(max(iteration, 0), total_iters)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_iters))
