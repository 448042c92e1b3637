"""Adam with decoupled weight decay, plus the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is decoupled: ``lr * weight_decay * p`` is subtracted on top
    of the Adam step, using the pre-update parameter value. A non-finite
    gradient rejects the whole step before anything is modified.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        decay = weight_decay * p if weight_decay else 0.0
        p -= lr * (update + decay)
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for named tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(arrays, grads, self.state, self.lr, *self.betas, self.eps, self.weight_decay)


def step_decay_lr(epoch: int, base_lr: float, milestones: Sequence[int], factor: float) -> float:
    """Learning rate for a 1-based ``epoch``: divided by ``factor`` after each milestone.

    With milestones (40, 60) and factor 5, epochs 1-40 use base_lr, 41-60 use
    base_lr/5 and 61+ use base_lr/25.
    """
    passed = sum(1 for m in milestones if epoch > m)
    return base_lr / factor**passed
