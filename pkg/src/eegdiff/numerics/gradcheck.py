"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


# central-difference stencils: offsets (in units of h) and weights
_STENCILS = {3: ((1, -1), (0.5, -0.5)), 5: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))}


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, points: int = 3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``; ``points``
    is 3 (error O(h²)) or 5 (error O(h⁴))."""
    if points not in _STENCILS:
        raise ValueError(f"points must be one of {sorted(_STENCILS)}")
    offsets, weights = _STENCILS[points]
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        total = 0.0
        for k, w in zip(offsets, weights):
            flat[i] = orig + k * h
            total += w * float(f().data)
        flat[i] = orig
        grad.reshape(-1)[i] = total / h
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """||a - b|| / max(||a||, ||b||, floor); ``floor`` keeps gradients that are
    exactly zero (e.g. a bias ahead of a normalization) from comparing rounding
    noise against rounding noise."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    floor: float = 1e-7, points: int = 3) -> float:
    """Worst relative error between analytic and numerical gradients."""
    grads = backward(f())
    worst = 0.0
    for x in inputs:
        analytic = grads.get(x, np.zeros_like(x.data))
        worst = max(worst, relative_error(analytic, numerical_grad(f, x, h, points), floor))
    return worst
