from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter

DEFAULT_LR = 5e-4


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float = DEFAULT_LR, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and the new state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append((p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Adam over a list of :class:`Parameter` objects."""

    def __init__(self, params: list[Parameter], lr: float = DEFAULT_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        values, self.state = adam_step([p.value for p in self.params],
                                       [p.grad for p in self.params], self.state,
                                       self.lr, self.beta1, self.beta2, self.eps)
        for p, v in zip(self.params, values):
            p.value = v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.value)
