"""Bias-corrected Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Update ``params`` in place. Missing gradients count as zero."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: ModelParams, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.grad_clip = grad_clip
        self.state = AdamState()

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the gradient norm."""
        grads = {n: t.grad for n, t in self.params.items() if t.grad is not None}
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
            grads = {n: g * scale for n, g in grads.items()}
        adam_step({n: t.data for n, t in self.params.items()}, grads, self.state,
                  self.lr, self.betas, self.eps)
        return norm

    def zero_grad(self) -> None:
        self.params.zero_grad()
