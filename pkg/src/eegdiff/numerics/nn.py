"""Parameter containers and the layers shared by every model."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Tensor, default_dtype


class Parameter(Tensor):
    """A leaf tensor owned by a module.

    ``trainable`` is the checkpointed freezing flag; frozen parameters do not
    request gradients.
    """

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=trainable, name=name)
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = bool(flag)


class Module:
    """Minimal module tree: parameters and submodules are found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into parameters, validating names and shapes."""
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(arrays))
            unexpected = sorted(set(arrays) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in arrays:
                continue
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_out, d_in), bound))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), bound))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate Q/K/V/output projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        return ops.transpose(x.reshape(B, N, self.heads, D // self.heads), (0, 2, 1, 3))

    def forward(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        """``bias`` is an additive, non-trainable logit offset broadcast against B×heads×N×N."""
        B, N, D = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = (q @ k.T) * (1.0 / math.sqrt(D // self.heads))
        if bias is not None:
            scores = scores + Tensor(np.asarray(bias, dtype=scores.dtype))
        attn = ops.softmax(scores, axis=-1)
        y = ops.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, N, D)
        return self.out(y)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape n×dim."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    freq = np.exp(-math.log(10000.0) * 2 * i / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : dim - dim // 2]
    return table


def distance_bias(positions: np.ndarray, heads: int) -> np.ndarray:
    """Linear attention penalty -m_h·|i - j| with geometric per-head slopes m_h = 2^(-8h/heads).

    ``positions`` is B×N (or N) integer token indices; returns B×heads×N×N (or heads×N×N).
    """
    positions = np.asarray(positions, dtype=np.float64)
    slopes = 2.0 ** (-8.0 * np.arange(1, heads + 1) / heads)
    dist = np.abs(positions[..., :, None] - positions[..., None, :])
    return -slopes[:, None, None] * dist[..., None, :, :]


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape len(t)×dim."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))[None, :]
    return np.concatenate([np.sin(t * freq), np.cos(t * freq)], axis=1)
