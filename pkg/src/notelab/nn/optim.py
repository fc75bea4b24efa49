"""AdamW with decoupled weight decay, plus the warmup/decay learning-rate ramp."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, TrainingError
from .tensor import Tensor


@dataclass
class ScheduleConfig:
    """Piecewise-linear ramp: 0 -> peak over ``warmup`` steps, peak -> 0 at ``total``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ContractError("peak_lr must be positive")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")
        if self.total_steps <= self.warmup_steps:
            raise ContractError("total_steps must exceed warmup_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at ``step``; steps past the end clamp to 0 with a warning."""
    if step < 0:
        raise ContractError("step must be >= 0")
    if step > cfg.total_steps:
        warnings.warn(
            f"lr_at: step {step} beyond schedule end {cfg.total_steps}; using 0",
            stacklevel=2,
        )
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class OptimizerState:
    """Moment buffers and step counter for a named parameter set."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameter tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr < 0:
            raise ContractError("lr must be >= 0")
        if weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None):
        """Apply one update using each parameter's accumulated gradient."""
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ContractError("lr must be >= 0")
        b1, b2 = self.betas
        self.state.step_count += 1
        t = self.state.step_count
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    optimizer: AdamW,
    lr: float,
) -> None:
    """Functional entry point: load explicit grads, then apply one AdamW step."""
    for name, g in grads.items():
        params[name]._grad = np.asarray(g, dtype=params[name].data.dtype).copy()
    optimizer.step(lr)
