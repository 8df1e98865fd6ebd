from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import StateError, ValidationError


@dataclass(frozen=True)
class SgdConfig:
    """SGD with momentum and L2 weight decay.

    ``schedule`` holds ``(epoch, multiplier)`` pairs; every pair whose epoch
    has been reached multiplies the base rate, so ``((60, 0.1), (80, 0.1))``
    gives 0.01 -> 0.001 at epoch 60 -> 0.0001 at epoch 80.
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = ((60, 0.1), (80, 0.1))

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        object.__setattr__(self, "schedule", tuple((int(e), float(m)) for e, m in self.schedule))

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, mult in self.schedule:
            if epoch >= e:
                lr *= mult
        return lr


def sgd_step(params, velocities, config: SgdConfig, epoch: int):
    """One in-place update; ``velocities`` is a list of arrays aligned with ``params``.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr(epoch) * v``.
    """
    lr = config.lr_at(epoch)
    for p, v in zip(params, velocities):
        if p.grad is None:
            raise StateError("parameter has no gradient; run backward() first")
        v *= config.momentum
        v += p.grad
        if config.weight_decay:
            v += config.weight_decay * p.data
        p.data -= lr * v
    return params


class Sgd:
    def __init__(self, params, config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, epoch: int):
        sgd_step(self.params, self.velocities, self.config, epoch)
