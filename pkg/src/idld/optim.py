"""AdamW and the warmup-then-step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class OptimState:
    """Moment accumulators keyed by parameter name plus hyperparameters.

    ``weight_decay=0`` gives plain Adam.
    """

    base_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays
    (a missing entry counts as a zero gradient). Returns ``(params, state)``.
    """
    if lr < 0:
        raise ContractViolation(f"learning rate must be >= 0, got {lr}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ContractViolation(f"moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    decay_rate: float = 0.96
    decay_every: int = 50

    def __post_init__(self):
        if self.warmup_steps < 1 or self.decay_every < 1:
            raise ContractViolation("warmup_steps and decay_every must be positive")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ContractViolation("decay_rate must lie in (0, 1]")


def lr_at(schedule, step):
    """Linear warmup to ``peak_lr``, then a staircase exponential decay."""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    drops = (step - schedule.warmup_steps) // schedule.decay_every
    return schedule.peak_lr * schedule.decay_rate ** drops
