"""Adam with bias correction, and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from nfuse.tensor import ShapeError, Tensor

SCHEDULES = ("constant", "step_halving", "poly")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    steps: int = 2000
    missing_protocol: str = "fixed_per_sample"
    schedule: str = "constant"
    halve_every: int = 100_000
    poly_power: float = 0.9

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.batch_size < 1 or self.steps < 0 or self.halve_every < 1:
            raise ValueError("eps, batch_size and halve_every must be positive; steps >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.missing_protocol not in ("fixed_per_sample", "resample_each_epoch"):
            raise ValueError("missing_protocol must be fixed_per_sample or resample_each_epoch")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """LR at 0-based ``step``."""
    if cfg.schedule == "step_halving":
        return cfg.lr * 0.5 ** (step // cfg.halve_every)
    if cfg.schedule == "poly":
        return cfg.lr * (1.0 - step / max(cfg.steps, 1)) ** cfg.poly_power
    return cfg.lr


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState,
              cfg: TrainConfig, t: int, lr: float | None = None) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update at 1-based step ``t``; returns new params and state."""
    if t < 1:
        raise ValueError("Adam step index t starts at 1")
    lr = cfg.lr if lr is None else lr
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=f"parameter {name}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = dt(cfg.beta1) * m + dt(1.0 - cfg.beta1) * g
        v = dt(cfg.beta2) * v + dt(1.0 - cfg.beta2) * (g * g)
        update = dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.eps))
        new_params[name] = Tensor(p.data - update, grad_enabled=True, dtype=p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)
