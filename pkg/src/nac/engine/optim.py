"""SGD with momentum, learning-rate schedules, l2 regularisation and clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Tensor


class SGDMomentum:
    """``v <- momentum * v + grad``; ``param <- param - lr * v``."""

    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9):
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = dict(params)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, grads: Mapping[str, np.ndarray] | None = None) -> None:
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        for k, p in self.params.items():
            g = p.grad if grads is None else grads.get(k)
            if g is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """Functional form over parallel lists of arrays (updated in place)."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p -= lr * v


@dataclass(frozen=True)
class ExponentialDecay:
    """Staircase decay: ``initial * decay_factor ** floor(epoch / period)``."""

    initial: float
    decay_factor: float
    decay_period_epochs: float

    def __call__(self, epoch: float) -> float:
        return self.initial * self.decay_factor ** math.floor(epoch / self.decay_period_epochs)


@dataclass(frozen=True)
class CosineDecay:
    """Cosine annealing from ``max_lr`` to ``min_lr``, restarting every ``period_epochs``."""

    max_lr: float
    min_lr: float
    period_epochs: float

    def __call__(self, epoch: float) -> float:
        phase = (epoch % self.period_epochs) / self.period_epochs
        return self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1 + math.cos(math.pi * phase))


@dataclass(frozen=True)
class ConstantRate:
    lr: float

    def __call__(self, epoch: float) -> float:
        return self.lr


def exponential_decay(initial: float, decay_factor: float, decay_period_epochs: float) -> ExponentialDecay:
    return ExponentialDecay(initial, decay_factor, decay_period_epochs)


def cosine_decay(max_lr: float, min_lr: float, period_epochs: float) -> CosineDecay:
    return CosineDecay(max_lr, min_lr, period_epochs)


def l2_regularization(params: Iterable[Tensor], coefficient: float) -> Tensor:
    """``coefficient * sum ||w||^2`` as a differentiable scalar."""
    terms = [ops.sum_squares(p) for p in params]
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, Tensor(np.asarray(coefficient, dtype=total.dtype)))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def gradient_clip_by_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale the concatenated gradient vector to norm at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0:
        return list(grads), norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm
