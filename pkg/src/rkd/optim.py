"""SGD with heavy-ball momentum and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class StepSchedule:
    """``lr = base_lr * gamma ** (epoch // step)``; epochs are 0-based."""

    base_lr: float = 0.1
    step: int = 30
    gamma: float = 0.1
    epochs: int = 100

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** (epoch // self.step)

    def to_dict(self) -> dict:
        return {"base_lr": self.base_lr, "step": self.step, "gamma": self.gamma, "epochs": self.epochs}


class SGD:
    """``v <- momentum * v + g``; ``p <- p - lr * v`` (no dampening, no decay).

    Velocities are created lazily as zeros on the first step for each param.
    With ``clip_norm`` set, gradients are rescaled so their global l2 norm
    does not exceed it before entering the velocity.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: Optional[float] = None):
        self.params = list(params)
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name or i!r} has no gradient")
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for i, p in enumerate(self.params):
            v = self.velocity.get(i)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + (p.grad * scale if scale != 1.0 else p.grad)
            self.velocity[i] = v.astype(p.data.dtype, copy=False)
            p.data -= (self.lr * self.velocity[i]).astype(p.data.dtype, copy=False)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params)))
