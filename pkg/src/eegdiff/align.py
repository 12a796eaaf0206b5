"""Alignment of EEG condition embeddings with a frozen image-embedding space,
and the joint fine-tuning stage that combines it with the denoising loss."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ImageEncoderConfig, RunConfig, stage_rng
from .diffusion import (ConditionalDenoiser, ConditionProjector, ImageAutoencoder, build_denoiser,
                        is_attention_head, schedule_from, sd_loss)
from .msm import EegEncoder, build_encoder, tokens_from_recordings
from .numerics import Adam, NonFiniteError, Tensor, backward, no_grad
from .numerics import ops
from .numerics.nn import Conv2d, Linear, Module, Parameter
from .signal import PairedDataset

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


# ------------------------------------------------------------ image encoder
class ConvClassifier(Module):
    """Three conv stages, global average pool, a penultimate dense layer and a
    linear classifier. The penultimate activations double as an embedding."""

    def __init__(self, n_classes: int, width: int, embed_dim: int, rng: np.random.Generator):
        w = width
        self.convs = [Conv2d(3, w, 3, rng), Conv2d(w, 2 * w, 3, rng, stride=2),
                      Conv2d(2 * w, 2 * w, 3, rng, stride=2)]
        self.fc = Linear(2 * w, embed_dim, rng)
        self.out = Linear(embed_dim, n_classes, rng)
        self.n_classes = n_classes

    def features(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.fc.weight.dtype))
        for conv in self.convs:
            x = ops.gelu(conv(x))
        return ops.gelu(self.fc(ops.mean(x, axis=(2, 3))))

    def forward(self, images) -> Tensor:
        return self.out(self.features(images))

    def predict(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        with no_grad():
            return np.concatenate([self(images[i:i + batch]).data.argmax(axis=1)
                                   for i in range(0, len(images), batch)])


class FrozenImageEncoder(ConvClassifier):
    """Stand-in for a pretrained image encoder: E_I(I) is the L2-normalised
    penultimate activation."""

    def embed(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        with no_grad():
            return np.concatenate([ops.l2_normalize(self.features(images[i:i + batch]), axis=-1).data
                                   for i in range(0, len(images), batch)])


@dataclass
class ClassifierResult:
    model: ConvClassifier
    train_accuracy: float
    losses: list[float]


def fit_classifier(model: ConvClassifier, images: np.ndarray, labels: np.ndarray, steps: int,
                   batch_size: int, lr: float, rng: np.random.Generator, what: str) -> ClassifierResult:
    """Cross-entropy training with Adam; random horizontal flips as the only augmentation."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) < 1 or len(images) != len(labels):
        raise ValueError(f"{what}: need matching, non-empty images and labels")
    opt = Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = images[idx]
        flip = rng.random(len(idx)) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
        try:
            loss = ops.cross_entropy(model(x), labels[idx])
            opt.step(backward(loss))
        except NonFiniteError as exc:
            raise RuntimeError(f"{what} training diverged at step {step}") from exc
        losses.append(float(loss.data))
    acc = float(np.mean(model.predict(images) == labels))
    return ClassifierResult(model, acc, losses)


def train_image_encoder(images: np.ndarray, labels: np.ndarray, n_classes: int,
                        cfg: RunConfig) -> ClassifierResult:
    """Train the image-encoder stand-in; every parameter is frozen on return."""
    c: ImageEncoderConfig = cfg.image_encoder
    model = FrozenImageEncoder(n_classes, c.width, c.embed_dim, stage_rng(cfg.seed, "image_encoder.init"))
    res = fit_classifier(model, images, labels, c.steps, c.batch_size, c.lr,
                         stage_rng(cfg.seed, "image_encoder.batches"), "image encoder")
    model.set_trainable(False)
    log.info("image encoder train accuracy %.3f", res.train_accuracy)
    return res


def image_encoder_from(ckpt: Checkpoint, cfg: RunConfig) -> FrozenImageEncoder:
    n_classes = int(ckpt.meta.get("n_classes", cfg.data.n_classes))
    c = cfg.image_encoder
    model = FrozenImageEncoder(n_classes, c.width, c.embed_dim, np.random.default_rng(0))
    ckpt.load_into(model, "image_encoder")
    model.set_trainable(False)
    return model


# --------------------------------------------------------------- alignment
class AlignmentHead(Module):
    """h: pooled condition embedding (d_τ) → image-embedding width."""

    def __init__(self, context_dim: int, clip_dim: int, rng: np.random.Generator):
        self.proj = Linear(context_dim, clip_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(x)


def pool_rows(context: Tensor, pooling: str = "mean") -> Tensor:
    """Reduce the M condition rows (axis -2) to a single row, keeping the axis."""
    if pooling == "mean":
        return ops.mean(context, axis=-2, keepdims=True)
    if pooling == "first":
        return ops.getitem(context, (Ellipsis, slice(0, 1), slice(None)))
    raise ValueError(f"unknown pooling {pooling!r} (mean | first)")


def embed_context(context: Tensor, head: Module, pooling: str = "mean") -> Tensor:
    """h(pool(τ_θ(y))) normalised to unit length; ``context`` is τ_θ(y)."""
    raw = head(pool_rows(context, pooling))
    raw = ops.reshape(raw, raw.shape[:-2] + raw.shape[-1:])
    norms = np.sqrt((raw.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms < NORM_EPS):
        warnings.warn(f"{int((norms < NORM_EPS).sum())} EEG embedding(s) have zero norm before "
                      "normalisation", RuntimeWarning, stacklevel=2)
    return ops.l2_normalize(raw, axis=-1, eps=NORM_EPS)


def eeg_clip_embedding(y: Tensor, projector: Module, head: Module, pooling: str = "mean") -> Tensor:
    """Unit vector(s) h(pool(τ_θ(y))) for encoder output ``y`` ([B×]N×d_model)."""
    return embed_context(projector(y), head, pooling)


def clip_loss(eeg_emb, img_emb) -> Tensor:
    """1 − cos(eeg_emb, img_emb), averaged over leading axes. Range [0, 2]."""
    a = eeg_emb if isinstance(eeg_emb, Tensor) else Tensor(np.asarray(eeg_emb))
    b = img_emb if isinstance(img_emb, Tensor) else Tensor(np.asarray(img_emb, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=-1))
    nb = np.sqrt((b.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("clip_loss is undefined for zero-norm embeddings")
    cos = ops.sum(ops.l2_normalize(a, axis=-1) * ops.l2_normalize(b, axis=-1), axis=-1)
    return 1.0 - ops.mean(cos)


# ----------------------------------------------------------------- policy
GROUPS = ("E", "A", "tau", "h")
PRESETS = {"E+A": ("E", "A"), "E only": ("E",), "A only": ("A",)}


@dataclass(frozen=True)
class FinetunePolicy:
    """Trainable groups: E (EEG encoder), A (cross-attention projections),
    tau (condition projector) and h (alignment head)."""

    groups: frozenset
    lambda_clip: float = 1.0
    clip: bool = True

    def __post_init__(self):
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter group(s) {sorted(unknown)}; known: {GROUPS}")
        if self.lambda_clip < 0:
            raise ValueError("lambda_clip must be non-negative")
        if "h" in self.groups and not self.aligns:
            raise ValueError("group h is trainable only when the alignment loss is active")

    @property
    def aligns(self) -> bool:
        return self.clip and self.lambda_clip > 0

    @classmethod
    def preset(cls, name: str, clip: bool = True, lambda_clip: float = 1.0) -> "FinetunePolicy":
        if name not in PRESETS:
            raise ValueError(f"unknown policy preset {name!r} (choose from {sorted(PRESETS)})")
        groups = set(PRESETS[name]) | {"tau"}
        if clip and lambda_clip > 0:
            groups.add("h")
        return cls(frozenset(groups), lambda_clip, clip)


# -------------------------------------------------------------- fine-tune
@dataclass
class FinetuneModels:
    encoder: EegEncoder
    projector: ConditionProjector
    head: AlignmentHead
    denoiser: ConditionalDenoiser
    autoencoder: ImageAutoencoder
    image_encoder: FrozenImageEncoder

    def named(self) -> dict[str, Module]:
        return {"encoder": self.encoder, "projector": self.projector, "head": self.head,
                "denoiser": self.denoiser, "ae": self.autoencoder, "image_encoder": self.image_encoder}

    def context(self, tokens: np.ndarray) -> Tensor:
        return self.projector(self.encoder(tokens))


def group_parameters(models: FinetuneModels, group: str) -> list[tuple[str, Parameter]]:
    if group == "E":
        return list(models.encoder.named_parameters("encoder."))
    if group == "A":
        return [(n, p) for n, p in models.denoiser.named_parameters("denoiser.") if is_attention_head(n)]
    if group == "tau":
        return list(models.projector.named_parameters("projector."))
    if group == "h":
        return list(models.head.named_parameters("head."))
    raise ValueError(f"unknown group {group!r}")


def apply_policy(models: FinetuneModels, policy: FinetunePolicy) -> list[Parameter]:
    """Set every trainability flag from ``policy``; returns the trainable parameters."""
    for module in models.named().values():
        module.set_trainable(False)
    chosen: list[Parameter] = []
    for g in GROUPS:
        if g not in policy.groups:
            continue
        params = group_parameters(models, g)
        if not params:
            raise ValueError(f"policy requests group {g!r} but the model has no such parameters")
        for _, p in params:
            p.set_trainable(True)
            chosen.append(p)
    return chosen


def assemble_models(cfg: RunConfig, eeg_ckpt: Checkpoint | None, diffusion_ckpt: Checkpoint,
                    image_ckpt: Checkpoint, preset: str = "desk") -> FinetuneModels:
    """Instantiate all modules and load checkpoints. Without an EEG checkpoint the
    encoder starts from a fresh initialisation (no pretraining) of size ``preset``."""
    if eeg_ckpt is not None:
        preset = eeg_ckpt.meta.get("encoder_preset", "desk")
    init = stage_rng(cfg.seed, "finetune.init")
    encoder = build_encoder(cfg, init, preset)
    if eeg_ckpt is not None:
        eeg_ckpt.load_into(encoder, "encoder")
    for group in ("ae", "denoiser"):
        if not diffusion_ckpt.has_group(group):
            raise CheckpointError(f"diffusion checkpoint lacks the '{group}' parameters")
    ae = ImageAutoencoder(cfg.ae, np.random.default_rng(0), cfg.data.image_size)
    diffusion_ckpt.load_into(ae, "ae")
    latent_channels = ae.latent_shape[0]
    denoiser = build_denoiser(cfg, latent_channels, np.random.default_rng(0))
    diffusion_ckpt.load_into(denoiser, "denoiser")
    image_encoder = image_encoder_from(image_ckpt, cfg)
    projector = ConditionProjector(cfg.msm.d_model, cfg.diffusion.context_dim, init)
    head = AlignmentHead(cfg.diffusion.context_dim, cfg.image_encoder.embed_dim, init)
    return FinetuneModels(encoder, projector, head, denoiser, ae, image_encoder)


@dataclass
class FinetuneResult:
    models: FinetuneModels
    policy: FinetunePolicy
    log_rows: list[tuple[int, int, float, float]]  # epoch, step, l_sd, l_clip
    preset: str = "desk"

    def checkpoint(self, cfg: RunConfig, meta: dict | None = None) -> Checkpoint:
        info = {"config": cfg.to_flat(), "seed": cfg.seed, "policy": sorted(self.policy.groups),
                "lambda_clip": self.policy.lambda_clip, "clip": self.policy.clip,
                "encoder_preset": self.preset,
                "n_classes": self.models.image_encoder.n_classes}
        info.update(meta or {})
        return Checkpoint.from_modules("finetune", self.models.named(), info)


def write_log(path, rows: list[tuple[int, int, float, float]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "l_sd", "l_clip"])
        for epoch, step, l_sd, l_clip in rows:
            w.writerow([epoch, step, repr(float(l_sd)), repr(float(l_clip))])


def finetune(dataset: PairedDataset, eeg_ckpt: Checkpoint | None, diffusion_ckpt: Checkpoint,
             image_ckpt: Checkpoint, policy: FinetunePolicy, cfg: RunConfig,
             preset: str = "desk") -> FinetuneResult:
    """Minimise L_SD + λ·L_clip over the policy's groups.

    Both losses share one backward pass. L_clip never reaches the denoiser, so
    its gradient only lands on the encoder, τ_θ and h; L_SD reaches the encoder,
    τ_θ and the denoiser. Parameters outside the policy are never handed to the
    optimiser and stay bit-identical.
    """
    if len(dataset) < 1:
        raise ValueError("empty fine-tuning set")
    f = cfg.finetune
    models = assemble_models(cfg, eeg_ckpt, diffusion_ckpt, image_ckpt, preset)
    params = apply_policy(models, policy)
    tokens = tokens_from_recordings(dataset.recordings, cfg.signal)
    latents = np.concatenate([models.autoencoder.to_latent(dataset.images[i:i + 64])
                              for i in range(0, len(dataset), 64)])
    img_emb = models.image_encoder.embed(dataset.images)
    sched = schedule_from(cfg.diffusion)
    opt = Adam(params, lr=f.lr, grad_clip=f.grad_clip)
    rng = stage_rng(cfg.seed, "finetune.batches")
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / f.batch_size))
    rows: list[tuple[int, int, float, float]] = []
    encoder_frozen = "E" not in policy.groups
    order = rng.permutation(n)
    for step in range(1, f.steps + 1):
        k = (step - 1) % steps_per_epoch
        if k == 0 and step > 1:
            order = rng.permutation(n)
        idx = order[k * f.batch_size:(k + 1) * f.batch_size]
        try:
            if encoder_frozen:
                with no_grad():
                    y = Tensor(models.encoder(tokens[idx]).data)
            else:
                y = models.encoder(tokens[idx])
            ctx = models.projector(y)
            l_sd = sd_loss(latents[idx], ctx, models.denoiser, sched, rng)
            if policy.aligns:
                l_clip = clip_loss(embed_context(ctx, models.head, f.pooling), img_emb[idx])
                total = l_sd + policy.lambda_clip * l_clip
            else:
                with no_grad():
                    l_clip = clip_loss(embed_context(ctx, models.head, f.pooling), img_emb[idx])
                total = l_sd
            opt.step(backward(total))
        except NonFiniteError as exc:
            raise RuntimeError(f"fine-tuning diverged at step {step}") from exc
        epoch = (step - 1) // steps_per_epoch + 1
        rows.append((epoch, step, float(l_sd.data), float(l_clip.data)))
        if step % 50 == 0:
            log.info("finetune step %d l_sd %.4f l_clip %.4f", step, rows[-1][2], rows[-1][3])
    if eeg_ckpt is not None:
        preset = eeg_ckpt.meta.get("encoder_preset", preset)
    return FinetuneResult(models, policy, rows, preset)


def condition_context(models: FinetuneModels, tokens: np.ndarray, batch: int = 32) -> Tensor:
    """τ_θ(E(tokens)) for a batch of token sequences, without gradients."""
    with no_grad():
        parts = [models.context(tokens[i:i + batch]).data for i in range(0, len(tokens), batch)]
    return Tensor(np.concatenate(parts))


def models_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig) -> FinetuneModels:
    """Rebuild every module of a fine-tuned pipeline from its combined checkpoint."""
    preset = ckpt.meta.get("encoder_preset", "desk")
    rng = np.random.default_rng(0)
    encoder = build_encoder(cfg, rng, preset)
    ckpt.load_into(encoder, "encoder")
    ae = ImageAutoencoder(cfg.ae, rng, cfg.data.image_size)
    ckpt.load_into(ae, "ae")
    denoiser = build_denoiser(cfg, ae.latent_shape[0], rng)
    ckpt.load_into(denoiser, "denoiser")
    image_encoder = image_encoder_from(ckpt, cfg)
    projector = ConditionProjector(cfg.msm.d_model, cfg.diffusion.context_dim, rng)
    ckpt.load_into(projector, "projector")
    head = AlignmentHead(cfg.diffusion.context_dim, cfg.image_encoder.embed_dim, rng)
    ckpt.load_into(head, "head")
    return FinetuneModels(encoder, projector, head, denoiser, ae, image_encoder)
