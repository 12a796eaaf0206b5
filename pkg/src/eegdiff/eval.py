"""N-way top-1 evaluation of generated images and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (ConvClassifier, FinetuneModels, FinetunePolicy, condition_context, finetune,
                    fit_classifier, train_image_encoder)
from .checkpoint import Checkpoint
from .config import RunConfig, stage_rng
from .diffusion import (ConditionalDenoiser, ImageAutoencoder, sample, schedule_from, train_autoencoder,
                        train_unconditional, write_samples)
from .msm import encoder_checkpoint, pretrain, tokens_from_recordings
from .numerics import Tensor
from .signal import EegRecording, PairedDataset

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- probe
class ProbeClassifier(ConvClassifier):
    """Evaluation classifier; trained once on ground-truth images, then only queried."""


@dataclass
class ProbeResult:
    model: ProbeClassifier
    train_accuracy: float
    heldout_accuracy: float


def train_probe(train: PairedDataset, heldout: PairedDataset, cfg: RunConfig) -> ProbeResult:
    p = cfg.probe
    model = ProbeClassifier(train.n_classes, p.width, 2 * p.width, stage_rng(cfg.seed, "probe.init"))
    res = fit_classifier(model, train.images, train.labels, p.steps, p.batch_size, p.lr,
                         stage_rng(cfg.seed, "probe.batches"), "probe")
    model.set_trainable(False)
    heldout_acc = nway_accuracy(heldout.images, heldout.labels, model)
    log.info("probe train %.3f held-out %.3f", res.train_accuracy, heldout_acc)
    return ProbeResult(model, res.train_accuracy, heldout_acc)


def nway_accuracy(images: np.ndarray, labels, probe: ConvClassifier) -> float:
    """Fraction of images whose top-1 probe class equals the ground-truth label."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("no images to evaluate")
    if len(images) != len(labels):
        raise ValueError("one label per image required")
    return float(np.mean(probe.predict(np.asarray(images, dtype=np.float32)) == labels))


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def binomial_interval(n: int, p: float, level: float = 0.95) -> tuple[float, float]:
    """Central interval [lo, hi] of the accuracy k/n when k ~ Binomial(n, p)."""
    tail = (1.0 - level) / 2.0
    pmf = [math.comb(n, k) * p**k * (1.0 - p) ** (n - k) for k in range(n + 1)]
    cdf = np.cumsum(pmf)
    lo = int(np.searchsorted(cdf, tail, side="left"))
    hi = int(np.searchsorted(cdf, 1.0 - tail, side="left"))
    return lo / n, hi / n


# -------------------------------------------------------------- generation
def generate_conditional(models: FinetuneModels, test: PairedDataset, cfg: RunConfig,
                         stream: str = "eval.conditional") -> tuple[np.ndarray, np.ndarray]:
    """One image per test recording (times ``eval.repeats``), with its class labels."""
    tokens = tokens_from_recordings(test.recordings, cfg.signal)
    reps = cfg.eval.repeats
    ctx = condition_context(models, np.repeat(tokens, reps, axis=0))
    labels = np.repeat(test.labels, reps)
    images = sample_batched(ctx, models.denoiser, models.autoencoder, cfg, stage_rng(cfg.seed, stream))
    return images, labels


def generate_unconditional(denoiser: ConditionalDenoiser, ae: ImageAutoencoder, n: int,
                           cfg: RunConfig) -> np.ndarray:
    return sample_batched(None, denoiser, ae, cfg, stage_rng(cfg.seed, "eval.unconditional"), n)


def sample_batched(ctx: Tensor | None, denoiser: ConditionalDenoiser, ae: ImageAutoencoder, cfg: RunConfig,
                   rng: np.random.Generator, n: int | None = None, batch: int = 64) -> np.ndarray:
    sched = schedule_from(cfg.diffusion)
    total = ctx.shape[0] if ctx is not None else n
    out = []
    for i in range(0, total, batch):
        part = None if ctx is None else Tensor(ctx.data[i:i + batch])
        k = min(batch, total - i)
        out.append(sample(part, denoiser, sched, ae, rng, k))
    return np.concatenate(out)


def unconditional_accuracy(denoiser: ConditionalDenoiser, ae: ImageAutoencoder, probe: ConvClassifier,
                           n_classes: int, cfg: RunConfig) -> tuple[float, int]:
    """Accuracy of null-context samples against balanced labels; expectation is 1/K."""
    n = cfg.eval.unconditional_samples
    images = generate_unconditional(denoiser, ae, n, cfg)
    labels = np.arange(n) % n_classes
    return nway_accuracy(images, labels, probe), n


# ------------------------------------------------------- shared artefacts
@dataclass
class SharedStages:
    """Stages that do not vary along the ablation axes: AE, unconditional
    denoiser, image encoder and evaluation probe."""

    diffusion_ckpt: Checkpoint
    image_ckpt: Checkpoint
    probe: ProbeResult
    ae_mse: float
    image_encoder_accuracy: float


def diffusion_checkpoint(ae: ImageAutoencoder, denoiser: ConditionalDenoiser, cfg: RunConfig) -> Checkpoint:
    meta = {"config": cfg.to_flat(), "seed": cfg.seed}
    return Checkpoint.from_modules("ldm", {"ae": ae, "denoiser": denoiser}, meta)


def prepare_shared(train: PairedDataset, test: PairedDataset, cfg: RunConfig) -> SharedStages:
    ae_res = train_autoencoder(train.images, cfg)
    latents = ae_res.model.to_latent(train.images)
    warm = train_unconditional(latents, cfg)
    ie = train_image_encoder(train.images, train.labels, train.n_classes, cfg)
    image_ckpt = Checkpoint.from_modules("image_encoder", {"image_encoder": ie.model},
                                         {"n_classes": train.n_classes, "train_accuracy": ie.train_accuracy})
    probe = train_probe(train, test, cfg)
    return SharedStages(diffusion_checkpoint(ae_res.model, warm.model, cfg), image_ckpt, probe,
                        ae_res.train_mse, ie.train_accuracy)


# ----------------------------------------------------------------- ablation
@dataclass(frozen=True)
class GridRow:
    row_id: str
    msm: bool
    clip: bool
    mask_ratio: float | None
    groups: str
    size: str = "desk"


# every row of the reference ablation table; "size" maps its model-size column
# to an encoder depth preset
TABLE1 = {
    "Full": GridRow("Full", True, True, 0.75, "E+A"),
    "1": GridRow("1", False, False, None, "E+A"),
    "2": GridRow("2", False, False, None, "E+A", "shallow"),
    "3": GridRow("3", False, True, None, "E+A"),
    "4": GridRow("4", False, True, None, "E+A", "shallow"),
    "5": GridRow("5", True, True, 0.25, "E+A"),
    "6": GridRow("6", True, True, 0.5, "E+A"),
    "7": GridRow("7", True, True, 0.85, "E+A"),
    "8": GridRow("8", True, True, 0.75, "E+A", "xl"),
    "9": GridRow("9", True, True, 0.75, "E+A", "medium"),
    "10": GridRow("10", True, True, 0.75, "E+A", "small"),
    "11": GridRow("11", True, True, 0.75, "E+A", "shallow"),
    "12": GridRow("12", True, True, 0.75, "E only"),
    "13": GridRow("13", True, False, 0.75, "E+A"),
    "14": GridRow("14", True, False, 0.75, "A only"),
}
DEFAULT_GRID = ("Full", "1", "3", "5", "6", "7", "12", "13", "14")


@dataclass
class AblationRow:
    row: GridRow
    params: int
    accuracy: float
    error: str | None = None
    n_images: int = 0


@dataclass
class AblationRun:
    rows: list[AblationRow]
    shared: SharedStages
    pretrained: dict = field(default_factory=dict)


def grid_from(ids) -> list[GridRow]:
    out = []
    for r in ids:
        if isinstance(r, GridRow):
            out.append(r)
        elif str(r) in TABLE1:
            out.append(TABLE1[str(r)])
        else:
            raise ValueError(f"unknown ablation row {r!r}; known: {list(TABLE1)}")
    if len({r.row_id for r in out}) != len(out):
        raise ValueError("duplicate row ids in grid")
    return out


def run_row(row: GridRow, pretrain_set: list[EegRecording], train: PairedDataset, test: PairedDataset,
            shared: SharedStages, cfg: RunConfig, cache: dict, out_dir: Path | None) -> AblationRow:
    eeg_ckpt = None
    if row.msm:
        key = (row.mask_ratio, row.size)
        if key not in cache:
            run_cfg = cfg.update({"msm.mask_ratio": row.mask_ratio})
            res = pretrain(pretrain_set, run_cfg, preset=row.size)
            cache[key] = encoder_checkpoint(res, run_cfg, row.size)
        eeg_ckpt = cache[key]
    policy = FinetunePolicy.preset(row.groups, clip=row.clip, lambda_clip=cfg.finetune.lambda_clip)
    result = finetune(train, eeg_ckpt, shared.diffusion_ckpt, shared.image_ckpt, policy, cfg, row.size)
    images, labels = generate_conditional(result.models, test, cfg)
    acc = nway_accuracy(images, labels, shared.probe.model)
    if out_dir is not None:
        write_samples(out_dir / f"row_{row.row_id}", images, labels, ["eeg"] * len(labels))
    return AblationRow(row, result.models.encoder.num_parameters(), acc, None, len(labels))


def run_ablation(grid, corpus: tuple[list[EegRecording], PairedDataset, PairedDataset], cfg: RunConfig,
                 out_dir=None, shared: SharedStages | None = None,
                 pretrained: dict | None = None) -> AblationRun:
    """Run every grid row end to end; a failing row is recorded (accuracy NaN)
    and the grid continues."""
    rows = grid_from(grid)
    pretrain_set, train, test = corpus
    out = Path(out_dir) if out_dir is not None else None
    if shared is None:
        shared = prepare_shared(train, test, cfg)
    cache = {} if pretrained is None else pretrained
    results = []
    for row in rows:
        log.info("ablation row %s", row.row_id)
        try:
            results.append(run_row(row, pretrain_set, train, test, shared, cfg, cache, out))
        except Exception as exc:  # a failed row must not abort the grid
            log.error("row %s failed: %s", row.row_id, exc)
            results.append(AblationRow(row, 0, float("nan"), f"{type(exc).__name__}: {exc}"))
            if out is not None:
                (out / f"row_{row.row_id}").mkdir(parents=True, exist_ok=True)
                (out / f"row_{row.row_id}" / "error.txt").write_text(traceback.format_exc())
    if out is not None:
        write_ablation_csv(out / "ablation.csv", results)
    return AblationRun(results, shared, cache)


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "msm", "clip", "mask_ratio", "groups", "params", "accuracy"])
        for r in rows:
            g = r.row
            w.writerow([g.row_id, int(g.msm), int(g.clip), "-" if g.mask_ratio is None else g.mask_ratio,
                        g.groups, r.params, "nan" if r.error else repr(r.accuracy)])


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["ProbeClassifier", "train_probe", "nway_accuracy", "binomial_interval", "binomial_se",
           "run_ablation", "TABLE1", "DEFAULT_GRID"]
