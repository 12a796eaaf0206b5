"""Command-line entry point: one pipeline stage per invocation.

Configuration is merged as defaults < ``--config`` file < flags (``--set
key=value`` and ``--seed``). ``DREAM_SEED`` replaces the default root seed.
Stages exchange artefacts through ``--run-dir``::

    encoder.ddck  ae.ddck  ldm.ddck  image_encoder.ddck  finetune.ddck  probe.ddck
    pretrain_log.csv  finetune_log.csv  samples/  eval.json  ablation/
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import align, diffusion, eval as evaluation, msm
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, stage_rng
from .signal import PairedDataset, generate_synthetic_corpus, load_corpus, save_corpus

log = logging.getLogger("eegdiff")

CORPUS_FILES = {"pretrain": "pretrain.eegc", "train": "train.eegc", "test": "test.eegc"}
COMMANDS = ("gen-data", "pretrain", "train-ae", "train-image-encoder", "train-ldm", "finetune",
            "generate", "evaluate", "ablate")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- config
def parse_assignment(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def merge_config(file_layer: dict | None, flag_layer: dict | None, env: dict | None = None) -> RunConfig:
    """defaults (with DREAM_SEED) < config file < flags."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if env.get("DREAM_SEED"):
        try:
            cfg = cfg.update({"seed": int(env["DREAM_SEED"])})
        except ValueError as exc:
            raise UsageError(f"DREAM_SEED must be an integer, got {env['DREAM_SEED']!r}") from exc
    return cfg.update(file_layer or {}).update(flag_layer or {})


def config_from_args(args) -> RunConfig:
    file_layer = None
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        file_layer = json.loads(path.read_text())
        if not isinstance(file_layer, dict):
            raise UsageError("config file must hold a JSON object of flat keys")
    flags = dict(parse_assignment(s) for s in args.set or [])
    if args.seed is not None:
        flags["seed"] = args.seed
    return merge_config(file_layer, flags)


# ------------------------------------------------------------------ helpers
def _corpus_part(corpus: Path, part: str):
    path = corpus / CORPUS_FILES[part]
    if not path.is_file():
        raise UsageError(f"corpus file missing: {path} (run gen-data or provide it)")
    return load_corpus(path)


def _paired(corpus: Path, part: str) -> PairedDataset:
    data = _corpus_part(corpus, part)
    if not isinstance(data, PairedDataset):
        raise UsageError(f"{CORPUS_FILES[part]} is not a paired EEG-image corpus")
    return data


def _need_ckpt(run_dir: Path, name: str, producer: str) -> Checkpoint:
    path = run_dir / name
    if not path.is_file():
        raise UsageError(f"{path} not found (run '{producer}' first)")
    return load_checkpoint(path)


def _write_rows(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"config": cfg.to_flat(), "seed": cfg.seed, **extra}


# ------------------------------------------------------------------- stages
def cmd_gen_data(args, cfg: RunConfig) -> None:
    pre, train, test = generate_synthetic_corpus(cfg.data, cfg.seed)
    args.corpus.mkdir(parents=True, exist_ok=True)
    save_corpus(args.corpus / CORPUS_FILES["pretrain"], pre)
    save_corpus(args.corpus / CORPUS_FILES["train"], train)
    save_corpus(args.corpus / CORPUS_FILES["test"], test)
    print(f"wrote {len(pre)} pretraining, {len(train)} train and {len(test)} test recordings to {args.corpus}")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    recs = _corpus_part(args.corpus, "pretrain")
    if isinstance(recs, PairedDataset):
        recs = recs.recordings
    res = msm.pretrain(recs, cfg, preset=args.preset)
    save_checkpoint(msm.encoder_checkpoint(res, cfg, args.preset), args.run_dir / "encoder.ddck")
    _write_rows(args.run_dir / "pretrain_log.csv", ["epoch", "step", "masked_mse"], res.log_rows)
    print(f"pretrain: final epoch masked MSE {res.log_rows[-1][2]:.4f}")


def cmd_train_ae(args, cfg: RunConfig) -> None:
    train = _paired(args.corpus, "train")
    res = diffusion.train_autoencoder(train.images, cfg)
    save_checkpoint(Checkpoint.from_modules("ae", {"ae": res.model}, _meta(cfg, train_mse=res.train_mse)),
                    args.run_dir / "ae.ddck")
    print(f"autoencoder: train reconstruction MSE {res.train_mse:.5f}")


def _load_ae(run_dir: Path, cfg: RunConfig) -> diffusion.ImageAutoencoder:
    ck = _need_ckpt(run_dir, "ae.ddck", "train-ae")
    ae = diffusion.ImageAutoencoder(cfg.ae, np.random.default_rng(0), cfg.data.image_size)
    ck.load_into(ae, "ae")
    return ae


def cmd_train_image_encoder(args, cfg: RunConfig) -> None:
    train = _paired(args.corpus, "train")
    res = align.train_image_encoder(train.images, train.labels, train.n_classes, cfg)
    meta = _meta(cfg, n_classes=train.n_classes, train_accuracy=res.train_accuracy)
    save_checkpoint(Checkpoint.from_modules("image_encoder", {"image_encoder": res.model}, meta),
                    args.run_dir / "image_encoder.ddck")
    print(f"image encoder: train accuracy {res.train_accuracy:.3f}")


def cmd_train_ldm(args, cfg: RunConfig) -> None:
    train = _paired(args.corpus, "train")
    ae = _load_ae(args.run_dir, cfg)
    warm = diffusion.train_unconditional(ae.to_latent(train.images), cfg)
    save_checkpoint(evaluation.diffusion_checkpoint(ae, warm.model, cfg), args.run_dir / "ldm.ddck")
    print(f"denoiser warmup: final loss {warm.losses[-1] if warm.losses else float('nan'):.4f}")


def _diffusion_ckpt(run_dir: Path, cfg: RunConfig) -> Checkpoint:
    if (run_dir / "ldm.ddck").is_file():
        return load_checkpoint(run_dir / "ldm.ddck")
    # warmup is optional: start the denoiser from its initialisation
    ae = _load_ae(run_dir, cfg)
    den = diffusion.build_denoiser(cfg, ae.latent_shape[0], stage_rng(cfg.seed, "ldm.init"))
    return evaluation.diffusion_checkpoint(ae, den, cfg)


def cmd_finetune(args, cfg: RunConfig) -> None:
    train = _paired(args.corpus, "train")
    eeg = None if args.no_pretrain else _need_ckpt(args.run_dir, "encoder.ddck", "pretrain")
    image = _need_ckpt(args.run_dir, "image_encoder.ddck", "train-image-encoder")
    f = cfg.finetune
    policy = align.FinetunePolicy.preset(f.groups, clip=f.clip, lambda_clip=f.lambda_clip)
    res = align.finetune(train, eeg, _diffusion_ckpt(args.run_dir, cfg), image, policy, cfg)
    save_checkpoint(res.checkpoint(cfg), args.run_dir / "finetune.ddck")
    align.write_log(args.run_dir / "finetune_log.csv", res.log_rows)
    last = res.log_rows[-1]
    print(f"finetune: step {last[1]} l_sd {last[2]:.4f} l_clip {last[3]:.4f}")


def cmd_generate(args, cfg: RunConfig) -> None:
    ck = _need_ckpt(args.run_dir, "finetune.ddck", "finetune")
    models = align.models_from_checkpoint(ck, cfg)
    out = Path(args.out) if args.out else args.run_dir / "samples"
    if args.unconditional:
        n = cfg.eval.unconditional_samples
        images = evaluation.generate_unconditional(models.denoiser, models.autoencoder, n, cfg)
        labels = np.arange(n) % models.image_encoder.n_classes
        sources = ["null"] * n
    else:
        test = _paired(args.corpus, "test")
        images, labels = evaluation.generate_conditional(models, test, cfg)
        sources = [f"test:{i // cfg.eval.repeats}" for i in range(len(labels))]
    diffusion.write_samples(out, images, labels, sources)
    print(f"wrote {len(images)} samples to {out}")


def _probe(args, cfg: RunConfig) -> evaluation.ProbeResult:
    path = args.run_dir / "probe.ddck"
    train, test = _paired(args.corpus, "train"), _paired(args.corpus, "test")
    if path.is_file():
        ck = load_checkpoint(path)
        p = cfg.probe
        model = evaluation.ProbeClassifier(train.n_classes, p.width, 2 * p.width, np.random.default_rng(0))
        ck.load_into(model, "probe")
        return evaluation.ProbeResult(model, float(ck.meta["train_accuracy"]), float(ck.meta["heldout_accuracy"]))
    res = evaluation.train_probe(train, test, cfg)
    meta = _meta(cfg, train_accuracy=res.train_accuracy, heldout_accuracy=res.heldout_accuracy)
    save_checkpoint(Checkpoint.from_modules("probe", {"probe": res.model}, meta), path)
    return res


def cmd_evaluate(args, cfg: RunConfig) -> None:
    samples = Path(args.samples) if args.samples else args.run_dir / "samples"
    if not (samples / "index.csv").is_file():
        raise UsageError(f"no samples at {samples} (run 'generate' first)")
    probe = _probe(args, cfg)
    images, labels = diffusion.read_samples(samples)
    acc = evaluation.nway_accuracy(images, labels, probe.model)
    k = probe.model.n_classes
    lo, hi = evaluation.binomial_interval(len(labels), 1.0 / k)
    report = {"n_images": int(len(labels)), "n_classes": k, "accuracy": acc, "chance": 1.0 / k,
              "chance_interval_95": [lo, hi], "probe_heldout_accuracy": probe.heldout_accuracy}
    (args.run_dir / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"{k}-way top-1 accuracy {acc:.4f} over {len(labels)} images (chance {1.0 / k:.4f})")


def _read_grid(path) -> list[str]:
    if path is None:
        return list(evaluation.DEFAULT_GRID)
    data = json.loads(Path(path).read_text())
    rows = data.get("rows") if isinstance(data, dict) else data
    if not isinstance(rows, list) or not rows:
        raise UsageError("grid file must be a JSON list of row ids or {\"rows\": [...]}")
    return [str(r) for r in rows]


def cmd_ablate(args, cfg: RunConfig) -> None:
    grid = _read_grid(args.grid)
    pre = _corpus_part(args.corpus, "pretrain")
    corpus = (pre.recordings if isinstance(pre, PairedDataset) else pre,
              _paired(args.corpus, "train"), _paired(args.corpus, "test"))
    out = args.run_dir / "ablation"
    run = evaluation.run_ablation(grid, corpus, cfg, out)
    for r in run.rows:
        status = f"accuracy {r.accuracy:.4f}" if r.error is None else f"FAILED ({r.error})"
        print(f"row {r.row.row_id}: {status}")
    print(f"wrote {out / 'ablation.csv'}")


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-ae": cmd_train_ae,
    "train-image-encoder": cmd_train_image_encoder, "train-ldm": cmd_train_ldm, "finetune": cmd_finetune,
    "generate": cmd_generate, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
}


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegdiff", description="EEG-conditioned latent diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    common.add_argument("--run-dir", type=Path, default=Path("runs/default"), help="artefact directory")
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="root seed (default: DREAM_SEED or 0)")
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {
        "gen-data": "write the synthetic paired corpus", "pretrain": "masked signal pretraining",
        "train-ae": "train the image autoencoder", "train-image-encoder": "train the frozen image encoder",
        "train-ldm": "unconditional denoiser warmup", "finetune": "joint fine-tuning with alignment",
        "generate": "sample images for the test recordings", "evaluate": "N-way top-1 accuracy of samples",
        "ablate": "run the ablation grid",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    subs["pretrain"].add_argument("--preset", default="desk", help="encoder size preset")
    subs["finetune"].add_argument("--no-pretrain", action="store_true", help="start from a fresh encoder")
    subs["generate"].add_argument("--out", help="output directory (default RUN_DIR/samples)")
    subs["generate"].add_argument("--unconditional", action="store_true", help="use the null context")
    subs["evaluate"].add_argument("--samples", help="samples directory (default RUN_DIR/samples)")
    subs["ablate"].add_argument("--grid", help="JSON list of ablation row ids")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_from_args(args)
        args.run_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, cfg)
    except KeyboardInterrupt:
        print("eegdiff: interrupted", file=sys.stderr)
        return 130
    except (UsageError, KeyError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"eegdiff {args.command}: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
