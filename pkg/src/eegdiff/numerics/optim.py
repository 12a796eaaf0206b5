from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays and the advanced state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - update).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_params, AdamState(step, new_m, new_v)


class Adam:
    """Adam over a fixed list of parameters; missing gradients count as zero."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state = AdamState()

    def step(self, grads: dict) -> None:
        gs = []
        for p in self.params:
            g = grads.get(p)
            gs.append(np.zeros_like(p.data) if g is None else g)
        if self.grad_clip is not None:
            total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in gs)))
            if total > self.grad_clip:
                gs = [g * (self.grad_clip / total) for g in gs]
        new, self.state = adam_step([p.data for p in self.params], gs, self.state,
                                    self.lr, self.betas[0], self.betas[1], self.eps)
        for p, arr in zip(self.params, new):
            p.data = arr
            p.grad = None
