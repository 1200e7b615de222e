"""AdamW with a cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * t / T))``, held at 0 once ``t >= T``."""
    if step >= total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    lr0: float = 5e-4
    weight_decay: float = 1e-2
    total_steps: int = 1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self) -> float:
        return cosine_lr(self.lr0, self.step, self.total_steps)


def adamw_step(state: OptimizerState, params: dict, grads: dict) -> float:
    """Update ``params`` (name -> ndarray) in place; returns the learning rate used."""
    lr = state.lr()
    t = state.step + 1
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
    state.step = t
    return lr


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
