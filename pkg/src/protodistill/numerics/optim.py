from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    state: AdamWState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float | None = None,
) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW update. Returns new parameter arrays and a new state.

    Weight decay is decoupled: it scales the parameters directly and never
    enters the moment estimates. Inputs are left untouched, so a rejected
    step (non-finite gradient) leaves the caller's state as it was.
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i}; step rejected")

    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p * (1.0 - lr * state.weight_decay) - lr * update)
        new_m.append(m)
        new_v.append(v)

    new_state = AdamWState(
        lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
        weight_decay=state.weight_decay, t=t, m=new_m, v=new_v,
    )
    return new_params, new_state


class AdamW:
    """Stateful wrapper that updates ``Tensor`` parameters in place."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        new, self.state = adamw_step(self.state, [p.data for p in self.params], grads, lr)
        for p, d in zip(self.params, new):
            p.data = d


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
