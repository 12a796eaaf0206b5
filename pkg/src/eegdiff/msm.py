"""Temporal masked signal modeling: the EEG encoder and its pretraining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import MsmConfig, RunConfig, SignalConfig, stage_rng
from .numerics import Adam, NonFiniteError, Tensor, backward, no_grad
from .numerics import ops
from .numerics.nn import LayerNorm, Linear, Module, Parameter, TransformerBlock, distance_bias, sinusoidal_table
from .signal import EegRecording, preprocess_batch, tokenize_array

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    masked: np.ndarray  # sorted indices
    mask_ratio: float

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)


def mask_count(n_tokens: int, mask_ratio: float) -> int:
    if not 0 < mask_ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {mask_ratio}")
    n_mask = math.floor(mask_ratio * n_tokens)
    if n_mask < 1 or n_mask >= n_tokens:
        raise ValueError(f"mask ratio {mask_ratio} leaves {n_mask} of {n_tokens} tokens masked")
    return n_mask


def sample_mask(n_tokens: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly choose exactly floor(ratio·n) tokens to hide."""
    n_mask = mask_count(n_tokens, mask_ratio)
    masked = np.sort(rng.permutation(n_tokens)[:n_mask])
    return MaskPlan(n_tokens, masked, mask_ratio)


def _stack_plans(plans: list[MaskPlan]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans])


class EegEncoder(Module):
    """Token embedding (a stride-S conv1d over the raw signal), fixed sinusoidal
    positions, pre-norm transformer blocks and a final norm."""

    def __init__(self, channels: int, token_size: int, n_tokens: int, d_model: int,
                 depth: int, heads: int, rng: np.random.Generator, distance_bias: bool = False):
        self.channels = channels
        self.heads = heads
        self.distance_bias = distance_bias
        self.token_size = token_size
        self.n_tokens = n_tokens
        self.d_model = d_model
        fan_in = channels * token_size
        self.embed_kernel = Parameter(rng.uniform(-1, 1, (d_model, channels, token_size)) / math.sqrt(fan_in))
        self.embed_bias = Parameter(np.zeros(d_model))
        self.pos = sinusoidal_table(n_tokens, d_model)
        self.blocks = [TransformerBlock(d_model, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(d_model)

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        w = self.embed_kernel.reshape(self.d_model, self.channels * self.token_size)
        return ops.linear(tokens, w, self.embed_bias)

    def forward(self, tokens, visible: np.ndarray | None = None) -> Tensor:
        """``tokens`` B×N×(C·S) (or N×(C·S)); ``visible`` B×n indices (or n)."""
        tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
        single = tokens.ndim == 2
        if single:
            tokens = tokens[None]
            visible = None if visible is None else np.asarray(visible)[None]
        B, N, D = tokens.shape
        if N != self.n_tokens or D != self.channels * self.token_size:
            raise ValueError(f"expected tokens ?×{self.n_tokens}×{self.channels * self.token_size}, got {tokens.shape}")
        pos = np.broadcast_to(self.pos, (B, N, self.d_model))
        index = np.broadcast_to(np.arange(N), (B, N))
        if visible is not None:
            visible = np.asarray(visible, dtype=np.int64)
            if visible.min() < 0 or visible.max() >= N:
                raise ValueError("visible index out of range")
            rows = np.arange(B)[:, None]
            tokens, pos, index = tokens[rows, visible], pos[rows, visible], visible
        x = self.embed_tokens(Tensor(tokens.astype(self.embed_bias.dtype)))
        x = x + Tensor(pos.astype(x.dtype))
        bias = distance_bias(index, self.heads) if self.distance_bias else None
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.norm(x)
        return ops.reshape(x, x.shape[1:]) if single else x


class MsmDecoder(Module):
    """Light transformer that restores masked positions from visible latents."""

    def __init__(self, d_model: int, token_dim: int, n_tokens: int, dim: int, depth: int,
                 heads: int, rng: np.random.Generator, distance_bias: bool = False):
        self.n_tokens = n_tokens
        self.heads = heads
        self.distance_bias = distance_bias
        self.proj = Linear(d_model, dim, rng)
        self.mask_token = Parameter(rng.normal(0, 0.02, (dim,)))
        self.pos = sinusoidal_table(n_tokens, dim)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, token_dim, rng)

    def forward(self, latents: Tensor, visible: np.ndarray, masked: np.ndarray) -> Tensor:
        B, n_vis, _ = latents.shape
        if visible.shape != (B, n_vis) or visible.shape[1] + masked.shape[1] != self.n_tokens:
            raise ValueError("mask plan inconsistent with latents")
        x = self.proj(latents)
        fill = ops.add(Tensor(np.zeros((B, masked.shape[1], x.shape[2]), dtype=x.dtype)), self.mask_token)
        full = ops.concat([x, fill], axis=1)  # visible first, then masked
        order = np.concatenate([visible, masked], axis=1)
        restore = np.argsort(order, axis=1, kind="stable")
        x = ops.index_rows(full, restore) + Tensor(self.pos.astype(x.dtype))
        bias = distance_bias(np.arange(self.n_tokens), self.heads) if self.distance_bias else None
        for blk in self.blocks:
            x = blk(x, bias)
        return self.head(self.norm(x))


def encode(tokens, plan: MaskPlan | list[MaskPlan] | None, enc: EegEncoder) -> Tensor:
    """Visible rows only when a plan is given; all N rows otherwise."""
    if plan is None:
        return enc(tokens)
    if isinstance(plan, MaskPlan):
        return enc(tokens, plan.visible)
    return enc(tokens, _stack_plans(plan)[0])


def reconstruct(latents: Tensor, plan: MaskPlan | list[MaskPlan], dec: MsmDecoder) -> Tensor:
    single = isinstance(plan, MaskPlan)
    plans = [plan] if single else plan
    if single and latents.ndim == 2:
        latents = ops.reshape(latents, (1,) + latents.shape)
    visible, masked = _stack_plans(plans)
    if latents.shape[0] != len(plans) or latents.shape[1] != visible.shape[1]:
        raise ValueError(f"latents {latents.shape} inconsistent with {len(plans)} plan(s) of "
                         f"{visible.shape[1]} visible tokens")
    out = dec(latents, visible, masked)
    return ops.reshape(out, out.shape[1:]) if single else out


def msm_loss(recon: Tensor, target, plan: MaskPlan | list[MaskPlan]) -> Tensor:
    """Mean squared error over the elements of masked tokens only."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if recon.shape != target.shape:
        raise ValueError(f"reconstruction {recon.shape} vs target {target.shape}")
    if isinstance(plan, MaskPlan):
        masked = plan.masked
        if masked.size == 0:
            raise ValueError("empty masked set")
        picked_t = target[masked] if target.ndim == 2 else target[:, masked]
        picked = ops.index_rows(recon, masked if recon.ndim == 2 else np.tile(masked, (recon.shape[0], 1)))
    else:
        masked = _stack_plans(plan)[1]
        if masked.size == 0:
            raise ValueError("empty masked set")
        picked = ops.index_rows(recon, masked)
        picked_t = target[np.arange(target.shape[0])[:, None], masked]
    return ops.mse(picked, Tensor(picked_t.astype(recon.dtype)))


def build_encoder(cfg: RunConfig, rng: np.random.Generator, preset: str = "desk") -> EegEncoder:
    s, m = cfg.signal, cfg.msm
    depth = encoder_depth(m, preset)
    return EegEncoder(s.target_channels, s.token_size, s.target_length // s.token_size,
                      m.d_model, depth, m.heads, rng, m.distance_bias)


def encoder_depth(m: MsmConfig, preset: str) -> int:
    # size presets standing in for the encoder-size axis of the ablation grid
    presets = {"xl": m.depth + 2, "desk": m.depth, "medium": max(1, m.depth - 1),
               "small": max(1, m.depth - 2), "shallow": 1}
    if preset not in presets:
        raise ValueError(f"unknown encoder preset {preset!r} (choose from {sorted(presets)})")
    return presets[preset]


def build_decoder(cfg: RunConfig, rng: np.random.Generator) -> MsmDecoder:
    s, m = cfg.signal, cfg.msm
    return MsmDecoder(m.d_model, s.target_channels * s.token_size, s.target_length // s.token_size,
                      m.dec_dim, m.dec_depth, m.dec_heads, rng, m.distance_bias)


def tokens_from_recordings(recs: list[EegRecording], sig: SignalConfig) -> np.ndarray:
    return tokenize_array(preprocess_batch(recs, sig), sig.token_size)


@dataclass
class PretrainResult:
    encoder: EegEncoder
    decoder: MsmDecoder
    log_rows: list[tuple[int, int, float]]  # epoch, step, masked_mse
    step_losses: list[float]


def masked_mse_on(tokens: np.ndarray, enc: EegEncoder, dec: MsmDecoder, mask_ratio: float,
                  seed: int = 12345) -> float:
    """Masked MSE on ``tokens`` under a fixed set of masks (evaluation only)."""
    rng = np.random.default_rng(seed)
    plans = [sample_mask(tokens.shape[1], mask_ratio, rng) for _ in range(tokens.shape[0])]
    with no_grad():
        return float(msm_loss(reconstruct(encode(tokens, plans, enc), plans, dec), tokens, plans).data)


def learning_rate(m: MsmConfig, step: int) -> float:
    """Linear warmup over ``m.warmup_steps``, then constant."""
    return m.lr * min(1.0, step / m.warmup_steps) if m.warmup_steps > 0 else m.lr


def pretrain(recordings: list[EegRecording], cfg: RunConfig, preset: str = "desk",
             tokens: np.ndarray | None = None) -> PretrainResult:
    """Masked reconstruction training with Adam; the decoder is returned separately
    so callers can drop it from the checkpoint."""
    if tokens is None:
        if not recordings:
            raise ValueError("empty pretraining corpus")
        tokens = tokens_from_recordings(recordings, cfg.signal)
    m = cfg.msm
    mask_count(tokens.shape[1], m.mask_ratio)
    init_rng = stage_rng(cfg.seed, "pretrain.init")
    enc = build_encoder(cfg, init_rng, preset)
    dec = build_decoder(cfg, init_rng)
    params = enc.parameters() + dec.parameters()
    opt = Adam(params, lr=m.lr, grad_clip=m.grad_clip)
    rng = stage_rng(cfg.seed, "pretrain.batches")
    n = tokens.shape[0]
    steps_per_epoch = max(1, math.ceil(n / m.batch_size))
    rows: list[tuple[int, int, float]] = []
    losses: list[float] = []
    order = rng.permutation(n)
    epoch_losses: list[float] = []
    for step in range(1, m.steps + 1):
        k = (step - 1) % steps_per_epoch
        if k == 0 and step > 1:
            order = rng.permutation(n)
        idx = order[k * m.batch_size:(k + 1) * m.batch_size]
        batch = tokens[idx]
        plans = [sample_mask(batch.shape[1], m.mask_ratio, rng) for _ in range(len(idx))]
        opt.lr = learning_rate(m, step)
        try:
            loss = msm_loss(reconstruct(encode(batch, plans, enc), plans, dec), batch, plans)
            opt.step(backward(loss))
        except NonFiniteError as exc:
            last = losses[-1] if losses else float("nan")
            raise TrainingDiverged(f"pretraining diverged at step {step} (last masked MSE {last:.4g})") from exc
        losses.append(float(loss.data))
        epoch_losses.append(losses[-1])
        if k == steps_per_epoch - 1 or step == m.steps:
            epoch = (step - 1) // steps_per_epoch + 1
            rows.append((epoch, step, float(np.mean(epoch_losses))))
            log.info("pretrain epoch %d step %d masked_mse %.4f", epoch, step, rows[-1][2])
            epoch_losses = []
    return PretrainResult(enc, dec, rows, losses)


def encoder_checkpoint(result: PretrainResult, cfg: RunConfig, preset: str = "desk") -> Checkpoint:
    """Encoder-only checkpoint; every encoder parameter is marked trainable."""
    result.encoder.set_trainable(True)
    meta = {"config": cfg.to_flat(), "seed": cfg.seed, "encoder_preset": preset}
    return Checkpoint.from_modules("pretrain", {"encoder": result.encoder}, meta)
