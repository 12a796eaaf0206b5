"""Small latent diffusion generator conditioned through cross-attention."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import AutoencoderConfig, DiffusionConfig, RunConfig, stage_rng
from .numerics import Adam, NonFiniteError, Tensor, backward, no_grad
from .numerics import ops
from .numerics.nn import Conv2d, GroupNorm, LayerNorm, Linear, Module, Parameter, timestep_embedding

log = logging.getLogger(__name__)


# --------------------------------------------------------------- autoencoder
class ImageAutoencoder(Module):
    """Conv encoder/decoder with a ×4 spatial reduction, or a pixel-space identity."""

    def __init__(self, cfg: AutoencoderConfig, rng: np.random.Generator, image_size: int = 32):
        self.identity = cfg.identity
        self.image_size = image_size
        self.latent_scale = Parameter(np.ones(1), trainable=False)
        if self.identity:
            self.latent_shape = (3, image_size, image_size)
            return
        w = cfg.width
        self.latent_shape = (cfg.latent_channels, image_size // 4, image_size // 4)
        self.enc = [Conv2d(3, w, 3, rng), Conv2d(w, 2 * w, 3, rng, stride=2),
                    Conv2d(2 * w, 2 * w, 3, rng, stride=2), Conv2d(2 * w, cfg.latent_channels, 1, rng)]
        self.dec = [Conv2d(cfg.latent_channels, 2 * w, 3, rng), Conv2d(2 * w, w, 3, rng),
                    Conv2d(w, w, 3, rng), Conv2d(w, 3, 3, rng)]

    def encode(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        for i, conv in enumerate(self.enc):
            x = conv(x)
            if i < len(self.enc) - 1:
                x = ops.gelu(x)
        return x

    def decode(self, z: Tensor) -> Tensor:
        if self.identity:
            return z
        c0, c1, c2, c3 = self.dec
        z = ops.gelu(c0(z))
        z = ops.gelu(c1(ops.upsample_nearest2d(z)))
        z = ops.gelu(c2(ops.upsample_nearest2d(z)))
        return ops.sigmoid(c3(z))

    def to_latent(self, images: np.ndarray) -> np.ndarray:
        """Scaled latents for diffusion (no gradient)."""
        with no_grad():
            z = self.encode(Tensor(np.asarray(images, dtype=self.latent_scale.dtype))).data
        return z * self.latent_scale.data[0]

    def from_latent(self, z: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.decode(Tensor((z / self.latent_scale.data[0]).astype(self.latent_scale.dtype))).data


@dataclass
class AutoencoderResult:
    model: ImageAutoencoder
    train_mse: float
    losses: list[float]


def train_autoencoder(images: np.ndarray, cfg: RunConfig) -> AutoencoderResult:
    """MSE-trained autoencoder; all parameters are frozen on return."""
    if len(images) < 1:
        raise ValueError("need at least one image")
    a = cfg.ae
    ae = ImageAutoencoder(a, stage_rng(cfg.seed, "ae.init"), images.shape[-1])
    losses: list[float] = []
    if not ae.identity:
        opt = Adam([p for p in ae.parameters() if p.trainable], lr=a.lr)
        rng = stage_rng(cfg.seed, "ae.batches")
        for step in range(a.steps):
            idx = rng.choice(len(images), size=min(a.batch_size, len(images)), replace=False)
            x = Tensor(images[idx])
            try:
                loss = ops.mse(ae.decode(ae.encode(x)), x)
                opt.step(backward(loss))
            except NonFiniteError as exc:
                raise RuntimeError(f"autoencoder training diverged at step {step}") from exc
            losses.append(float(loss.data))
            if step % 250 == 0:
                log.info("ae step %d mse %.5f", step, losses[-1])
    ae.set_trainable(False)
    mse = reconstruction_mse(ae, images)
    z = np.concatenate([ae.to_latent(images[i:i + 64]) for i in range(0, len(images), 64)])
    ae.latent_scale.data[:] = 1.0 / max(float(z.std()), 1e-6)
    return AutoencoderResult(ae, mse, losses)


def reconstruction_mse(ae: ImageAutoencoder, images: np.ndarray) -> float:
    with no_grad():
        errs = [float(((ae.decode(ae.encode(Tensor(images[i:i + 64]))).data - images[i:i + 64]) ** 2).sum())
                for i in range(0, len(images), 64)]
    return sum(errs) / images.size


# ------------------------------------------------------------------ schedule
@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-β DDPM schedule; arrays are indexed by t-1 for t in 1..T."""

    T: int
    betas: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return self.alpha_bars[t - 1]


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"invalid schedule T={T}, beta {beta_start}→{beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return DiffusionSchedule(T, betas)


def schedule_from(cfg: DiffusionConfig) -> DiffusionSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε; ``t`` is a scalar or one step per sample."""
    z0 = np.asarray(z0)
    if eps.shape != z0.shape:
        raise ValueError("noise must match the latent shape")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


# ----------------------------------------------------------- cross-attention
def cross_attention(x: Tensor, context: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                    heads: int = 1) -> Tensor:
    """softmax(QKᵀ/√d)·V with Q = x·W_Qᵀ, K = context·W_Kᵀ, V = context·W_Vᵀ.

    ``x`` is [B×]N×d_ε, ``context`` [B×]M×d_τ, W_Q d×d_ε and W_K, W_V d×d_τ.
    With several heads, d is split evenly and each head scales by its own width.
    """
    d = w_q.shape[0]
    if w_q.shape[1] != x.shape[-1] or w_k.shape != (d, context.shape[-1]) or w_v.shape != w_k.shape:
        raise ValueError(f"projection shapes {w_q.shape}, {w_k.shape}, {w_v.shape} do not fit "
                         f"x {x.shape} and context {context.shape}")
    if d % heads:
        raise ValueError(f"attention dim {d} not divisible by {heads} heads")
    q = ops.matmul(x, ops.swap_last(w_q))
    k = ops.matmul(context, ops.swap_last(w_k))
    v = ops.matmul(context, ops.swap_last(w_v))
    if heads == 1:
        attn = ops.softmax(ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(d)), axis=-1)
        return ops.matmul(attn, v)
    lead = q.shape[:-2]
    dh = d // heads

    def split(t):
        t = ops.reshape(t, lead + (t.shape[-2], heads, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ops.transpose(t, axes)

    qh, kh, vh = split(q), split(k), split(v)
    attn = ops.softmax(ops.matmul(qh, ops.swap_last(kh)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = ops.matmul(attn, vh)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ops.reshape(ops.transpose(out, axes), lead + (q.shape[-2], d))


class CrossAttentionBlock(Module):
    """Residual cross-attention over a feature map; W_Q/W_K/W_V/W_O form the trainable heads."""

    def __init__(self, channels: int, context_dim: int, attn_dim: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(channels)
        self.w_q = Parameter(rng.uniform(-1, 1, (attn_dim, channels)) / math.sqrt(channels))
        self.w_k = Parameter(rng.uniform(-1, 1, (attn_dim, context_dim)) / math.sqrt(context_dim))
        self.w_v = Parameter(rng.uniform(-1, 1, (attn_dim, context_dim)) / math.sqrt(context_dim))
        self.w_o = Linear(attn_dim, channels, rng)
        self.heads = heads

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        B, C, H, W = x.shape
        tokens = ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))
        y = cross_attention(self.norm(tokens), context, self.w_q, self.w_k, self.w_v, self.heads)
        y = self.w_o(y)
        return x + ops.reshape(ops.transpose(y, (0, 2, 1)), (B, C, H, W))


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.temb = Linear(temb_dim, c_out, rng)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.gelu(self.norm1(x)))
        t = self.temb(temb)
        h = h + ops.reshape(t, t.shape + (1, 1))
        h = self.conv2(ops.gelu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class ConditionalDenoiser(Module):
    """Two-level UNet ε_θ(z_t, t, context); conditioning enters only through
    the cross-attention blocks (one per resolution on the way down, one in the
    middle, one on the way up)."""

    def __init__(self, latent_channels: int, cfg: DiffusionConfig, rng: np.random.Generator):
        ch, g = cfg.channels, cfg.groups
        self.channels = ch
        self.context_dim = cfg.context_dim
        self.time1 = Linear(ch, ch, rng)
        self.time2 = Linear(ch, ch, rng)
        self.conv_in = Conv2d(latent_channels, ch, 3, rng)
        self.res_down = ResBlock(ch, ch, ch, g, rng)
        self.attn_down = CrossAttentionBlock(ch, cfg.context_dim, cfg.attn_dim, cfg.attn_heads, rng)
        self.downsample = Conv2d(ch, ch, 3, rng, stride=2)
        self.res_mid1 = ResBlock(ch, ch, ch, g, rng)
        self.attn_mid = CrossAttentionBlock(ch, cfg.context_dim, cfg.attn_dim, cfg.attn_heads, rng)
        self.res_mid2 = ResBlock(ch, ch, ch, g, rng)
        self.upsample = Conv2d(ch, ch, 3, rng)
        self.res_up = ResBlock(2 * ch, ch, ch, g, rng)
        self.attn_up = CrossAttentionBlock(ch, cfg.context_dim, cfg.attn_dim, cfg.attn_heads, rng)
        self.norm_out = GroupNorm(g, ch)
        self.conv_out = Conv2d(ch, latent_channels, 3, rng)
        self.null_context = Parameter(rng.normal(0, 1, (1, cfg.context_dim)))

    def attention_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if is_attention_head(name)]

    def forward(self, z_t, t, context: Tensor | None = None) -> Tensor:
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self.conv_in.weight.dtype))
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        if context is None:
            context = ops.add(Tensor(np.zeros((B, 1, self.context_dim), dtype=z.dtype)), self.null_context)
        elif context.ndim != 3 or context.shape[0] != B or context.shape[2] != self.context_dim:
            raise ValueError(f"context must be {B}×M×{self.context_dim}, got {context.shape}")
        temb = Tensor(timestep_embedding(t, self.channels).astype(z.dtype))
        temb = self.time2(ops.gelu(self.time1(temb)))
        h1 = self.conv_in(z)
        h1 = self.attn_down(self.res_down(h1, temb), context)
        h = self.downsample(h1)
        h = self.res_mid2(self.attn_mid(self.res_mid1(h, temb), context), temb)
        h = self.upsample(ops.upsample_nearest2d(h))
        h = self.res_up(ops.concat([h, h1], axis=1), temb)
        h = self.attn_up(h, context)
        return self.conv_out(ops.gelu(self.norm_out(h)))


def is_attention_head(name: str) -> bool:
    parts = name.split(".")
    return any(p.startswith("attn_") for p in parts) and any(p in ("w_q", "w_k", "w_v", "w_o") for p in parts)


class ConditionProjector(Module):
    """τ_θ: maps each encoder output row (d_model) to the context width d_τ."""

    def __init__(self, d_model: int, context_dim: int, rng: np.random.Generator):
        self.proj = Linear(d_model, context_dim, rng)

    def forward(self, y: Tensor) -> Tensor:
        return self.proj(y)


def denoise_predict(z_t, t, context: Tensor | None, model: ConditionalDenoiser) -> Tensor:
    return model(z_t, t, context)


# -------------------------------------------------------------- objective
Predictor = Callable[[np.ndarray, np.ndarray, "Tensor | None"], Tensor]


def sd_loss(z0: np.ndarray, context: Tensor | None, model: Predictor, schedule: DiffusionSchedule,
            rng: np.random.Generator) -> Tensor:
    """Mean over elements of (ε − ε̂(z_t, t, context))², t ~ U{1..T} and ε ~ N(0, I) per sample."""
    z0 = np.asarray(z0)
    if z0.shape[0] < 1:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    pred = model(z_t, t, context)
    if pred.shape != z0.shape:
        raise ValueError(f"prediction {pred.shape} does not match latent {z0.shape}")
    return ops.mse(pred, Tensor(eps))


def reverse_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: DiffusionSchedule,
                 noise: np.ndarray | None) -> np.ndarray:
    """Ancestral DDPM step with σ_t² = β_t (no noise added at t = 1)."""
    beta = schedule.betas[t - 1]
    alpha = 1.0 - beta
    ab = schedule.alpha_bars[t - 1]
    mean = (z_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t > 1 and noise is not None:
        mean = mean + math.sqrt(beta) * noise
    return mean.astype(z_t.dtype)


def sample_latents(context: Tensor | None, model: ConditionalDenoiser, schedule: DiffusionSchedule,
                   latent_shape: tuple[int, ...], rng: np.random.Generator, n: int) -> np.ndarray:
    dtype = model.conv_in.weight.dtype
    z = rng.standard_normal((n,) + tuple(latent_shape)).astype(dtype)
    with no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = model(z, np.full(n, t), context).data
            noise = rng.standard_normal(z.shape).astype(dtype) if t > 1 else None
            z = reverse_step(z, t, eps_hat, schedule, noise)
    return z


def sample(context: Tensor | None, model: ConditionalDenoiser, schedule: DiffusionSchedule,
           autoencoder: ImageAutoencoder, rng: np.random.Generator, n_images: int) -> np.ndarray:
    """Decode ancestral samples into n_images × 3×H×W images clamped to [0, 1]."""
    if context is not None and context.shape[0] != n_images:
        raise ValueError("need one context per image")
    z = sample_latents(context, model, schedule, autoencoder.latent_shape, rng, n_images)
    return np.clip(autoencoder.from_latent(z), 0.0, 1.0)


# --------------------------------------------------------- unconditional LDM
@dataclass
class WarmupResult:
    model: ConditionalDenoiser
    losses: list[float]


def build_denoiser(cfg: RunConfig, latent_channels: int, rng: np.random.Generator) -> ConditionalDenoiser:
    return ConditionalDenoiser(latent_channels, cfg.diffusion, rng)


def train_unconditional(latents: np.ndarray, cfg: RunConfig) -> WarmupResult:
    """Train the denoiser on latents with the learned null context only."""
    d = cfg.diffusion
    model = build_denoiser(cfg, latents.shape[1], stage_rng(cfg.seed, "ldm.init"))
    sched = schedule_from(d)
    opt = Adam(model.parameters(), lr=d.lr, grad_clip=1.0)
    rng = stage_rng(cfg.seed, "ldm.batches")
    losses = []
    for step in range(d.warmup_steps):
        idx = rng.choice(len(latents), size=min(d.batch_size, len(latents)), replace=False)
        try:
            loss = sd_loss(latents[idx], None, model, sched, rng)
            opt.step(backward(loss))
        except NonFiniteError as exc:
            raise RuntimeError(f"denoiser warmup diverged at step {step}") from exc
        losses.append(float(loss.data))
        if step % 250 == 0:
            log.info("ldm step %d loss %.4f", step, losses[-1])
    return WarmupResult(model, losses)


# ---------------------------------------------------------------- image I/O
def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 PPM from a 3×H×W array in [0, 1]."""
    _, H, W = image.shape
    pixels = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 PPM")
    W, H = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + 3 * W * H], dtype=np.uint8)
    return (pixels.reshape(H, W, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_samples(out_dir, images: np.ndarray, classes, sources) -> Path:
    """Write ``sample_XXXX.ppm`` files plus ``index.csv`` (sample_id,class,context_source)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class", "context_source"])
        for i, (img, cls, src) in enumerate(zip(images, classes, sources)):
            write_ppm(out / f"sample_{i:04d}.ppm", img)
            w.writerow([i, int(cls), src])
    return out / "index.csv"


def read_samples(out_dir) -> tuple[np.ndarray, np.ndarray]:
    out = Path(out_dir)
    images, classes = [], []
    with open(out / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_ppm(out / f"sample_{int(row['sample_id']):04d}.ppm"))
            classes.append(int(row["class"]))
    return np.stack(images), np.array(classes, dtype=np.int64)
