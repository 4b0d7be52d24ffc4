"""AdamW with decoupled weight decay and an exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamW", "exp_lr"]


def exp_lr(step: int, total_steps: int, lr_start: float = 4e-3, lr_end: float = 4e-4) -> float:
    """Geometric interpolation from lr_start at step 0 to lr_end at total_steps."""
    if total_steps <= 0 or lr_start == lr_end:
        return lr_start
    t = min(max(step, 0), total_steps) / total_steps
    return lr_start * (lr_end / lr_start) ** t


@dataclass
class AdamW:
    """Decoupled weight decay Adam.

    Updates are ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    A parameter whose gradient contains NaN is skipped for that step (moments
    untouched) and counted in ``nan_skips``.
    """

    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    nan_skips: int = 0
    _m: list[np.ndarray] = field(default_factory=list)
    _v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> int:
        """Apply one update; returns how many parameters were NaN-skipped."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        skipped = 0
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if np.isnan(g).any():
                skipped += 1
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)
        self.nan_skips += skipped
        return skipped

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
