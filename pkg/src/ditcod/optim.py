"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .nn import Parameter


@dataclass
class OptimState:
    lr: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 6e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimState(lr, betas[0], betas[1], eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


def adam_step(params: Sequence[Parameter], grads, state: OptimState) -> None:
    """Update ``params`` in place; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("optimizer moments do not match parameter shapes")
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
