from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "adam_step", "Adam"]

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_WEIGHT_DECAY = 0.001


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = DEFAULT_BETAS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    eps: float = 1e-8,
):
    """One Adam update with L2 weight decay folded into the gradient.

    Parameters are updated in place; ``(params, state)`` is returned for
    convenience.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, betas=DEFAULT_BETAS, weight_decay=DEFAULT_WEIGHT_DECAY, eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamState()

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.weight_decay, self.eps)
