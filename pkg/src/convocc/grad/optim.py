"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import GradError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_for(self, params: Sequence[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> None:
    """Apply one in-place Adam update; a ``None`` gradient counts as zero."""
    if len(grads) != len(params):
        raise GradError(f"adam: {len(grads)} gradients for {len(params)} parameters")
    if not state.m:
        state.init_for(params)
    if len(state.m) != len(params):
        raise GradError("adam: state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise GradError(f"adam: gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Thin owner of a parameter list and its :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0:
            raise GradError("adam: learning rate must be positive")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.state.init_for(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
