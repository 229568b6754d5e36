"""Learning-rate warm-up and in-place optimizers over ``name -> array`` dicts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ContractError


@dataclass
class WarmupSchedule:
    """Linear ramp from ``floor_fraction * base_lr`` to ``base_lr`` over ``warmup_steps``."""

    base_lr: float
    warmup_steps: int = 2000
    floor_fraction: float = 0.001

    def __post_init__(self):
        if self.base_lr < 0:
            raise ContractError("base_lr must be non-negative")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be non-negative")
        if not 0.0 <= self.floor_fraction <= 1.0:
            raise ContractError("floor_fraction must be in [0, 1]")

    def __call__(self, step: int) -> float:
        if self.warmup_steps == 0 or step >= self.warmup_steps:
            return self.base_lr
        frac = max(step, 0) / self.warmup_steps
        return self.base_lr * (self.floor_fraction + (1.0 - self.floor_fraction) * frac)


class SGD:
    def __init__(self, params: dict):
        self.params = params

    def step(self, grads: dict, lr: float):
        if lr == 0.0:
            return
        for name, g in grads.items():
            self.params[name] -= lr * g


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr != 0.0:
                self.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: dict):
    if name == "sgd":
        return SGD(params)
    if name == "adam":
        return Adam(params)
    raise ContractError(f"unknown optimizer {name!r}")
