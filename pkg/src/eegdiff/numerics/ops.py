"""Differentiable operations.

Binary elementwise ops follow numpy broadcasting; gradients are summed back to
each operand's shape. Everything else is shape-exact.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_SQRT_2_OVER_PI * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_result(out, (x,), bw)


# ------------------------------------------------------------------ shaping
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def index_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis.

    ``x`` is N×D with ``idx`` of shape (n,), or B×N×D with ``idx`` B×n
    (independent row selection per batch element).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim == 2:
        key = (idx,)
    elif x.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ValueError(f"index shape {idx.shape} incompatible with {x.shape}")
        key = (np.arange(x.shape[0])[:, None], idx)
    else:
        raise ValueError("index_rows expects a 2-D or 3-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise IndexError("row index out of range")
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result(out, (x,), bw)


def embedding(table: Tensor, idx) -> Tensor:
    """Look up rows of ``table`` by integer index (any index shape)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_result(out, (table,), bw)


# --------------------------------------------------------------- reductions
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // max(out.size, 1)

    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / n,)

    return make_result(out, (x,), bw)


# ------------------------------------------------------------ linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_result(out, (a, b), bw)

    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as out×in."""
    y = matmul(x, swap_last(weight))
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------ normalizations
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for {x.ndim}-D tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


def _normalize_last(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_last_bw(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per feature."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm affine parameters must match the last axis")
    xhat, inv = _normalize_last(x.data, eps)
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dx = _normalize_last_bw(g * gamma.data, xhat, inv)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of a B×C×H×W tensor with per-channel affine."""
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    spatial = x.shape[2:]
    xg = x.data.reshape(B, groups, -1)
    xhat_g, inv = _normalize_last(xg, eps)
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        red = (0,) + tuple(range(2, g.ndim))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        dx = _normalize_last_bw(dxhat, xhat_g, inv).reshape(x.shape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along ``axis`` (norm floored at ``eps``)."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        live = norm > eps
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return make_result(out, (x,), bw)


# -------------------------------------------------------------- convolution
def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: tuple[int, int]):
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ValueError(f"conv expects {cin} input channels, got {C}")
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    Hp, Wp = xp.shape[2:]
    if kh > Hp or kw > Wp:
        raise ValueError(f"kernel {kh}x{kw} longer than padded input {Hp}x{Wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wm = w.reshape(cout, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, (Ho, Wo), xp.shape


def _conv_backward(g, x_shape, xp_shape, w, cols, stride, pad, out_hw):
    B = g.shape[0]
    cout, cin, kh, kw = w.shape
    Ho, Wo = out_hw
    gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (gm.T @ cols).reshape(w.shape)
    dcols = (gm @ w.reshape(cout, -1)).reshape(B, Ho, Wo, cin, kh, kw)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    ph, pw = pad
    dx = dxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]]
    return np.ascontiguousarray(dx), dw, gm.sum(axis=0)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of B×C×H×W input with C_out×C_in×kh×kw kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if stride < 1:
        raise ValueError("stride must be positive")
    pad = (padding, padding)
    out, cols, out_hw, xp_shape = _conv_forward(x.data, weight.data, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        dx, dw, db = _conv_backward(g, x.shape, xp_shape, weight.data, cols, stride, pad, out_hw)
        return (dx, dw) if bias is None else (dx, dw, db)

    return make_result(out, parents, bw)


def conv1d(signal: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation of C_in×L (or B×C_in×L) with C_out×C_in×K kernels.

    Output length is ``floor((L - K) / stride) + 1``.
    """
    if kernels.ndim != 3:
        raise ValueError("conv1d kernels must be C_out×C_in×K")
    if stride < 1:
        raise ValueError("stride must be positive")
    batched = signal.ndim == 3
    if signal.ndim not in (2, 3):
        raise ValueError("conv1d signal must be C×L or B×C×L")
    if kernels.shape[2] > signal.shape[-1]:
        raise ValueError(f"kernel length {kernels.shape[2]} exceeds signal length {signal.shape[-1]}")
    x4 = reshape(signal, (signal.shape[0] if batched else 1, signal.shape[-2], 1, signal.shape[-1]))
    w4 = reshape(kernels, (kernels.shape[0], kernels.shape[1], 1, kernels.shape[2]))
    y = conv2d(x4, w4, bias, stride=stride)
    shape = (y.shape[0], y.shape[1], y.shape[3]) if batched else (y.shape[1], y.shape[3])
    return reshape(y, shape)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw)


# ------------------------------------------------------------------ losses
def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(labels.shape[0]), labels))
    return mul(mean(picked), -1.0)
