"""End-to-end desk run: corpus, pretraining, shared stages, fine-tuning,
conditional and unconditional generation, N-way evaluation.

    python3 scripts/run_desk_pipeline.py --out runs/desk [--set key=value ...]
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from eegdiff import align, eval as evaluation, msm
from eegdiff.checkpoint import save_checkpoint
from eegdiff.cli import parse_assignment
from eegdiff.config import RunConfig
from eegdiff.diffusion import write_samples
from eegdiff.signal import generate_synthetic_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--no-pretrain", action="store_true")
    ap.add_argument("--no-clip", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = RunConfig().update(dict(parse_assignment(s) for s in args.set))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.to_json())
    times: dict[str, float] = {}
    t0 = time.time()

    pre, train, test = generate_synthetic_corpus(cfg.data, cfg.seed)
    times["corpus"] = time.time() - t0
    eeg = None
    if not args.no_pretrain:
        t = time.time()
        res = msm.pretrain(pre, cfg)
        eeg = msm.encoder_checkpoint(res, cfg)
        save_checkpoint(eeg, args.out / "encoder.ddck")
        times["pretrain"] = time.time() - t
    t = time.time()
    shared = evaluation.prepare_shared(train, test, cfg)
    times["shared"] = time.time() - t
    t = time.time()
    f = cfg.finetune
    policy = align.FinetunePolicy.preset(f.groups, clip=f.clip and not args.no_clip, lambda_clip=f.lambda_clip)
    ft = align.finetune(train, eeg, shared.diffusion_ckpt, shared.image_ckpt, policy, cfg)
    align.write_log(args.out / "finetune_log.csv", ft.log_rows)
    times["finetune"] = time.time() - t
    t = time.time()
    images, labels = evaluation.generate_conditional(ft.models, test, cfg)
    acc = evaluation.nway_accuracy(images, labels, shared.probe.model)
    write_samples(args.out / "samples", images, labels, ["eeg"] * len(labels))
    times["conditional"] = time.time() - t
    t = time.time()
    null_acc, n_null = evaluation.unconditional_accuracy(ft.models.denoiser, ft.models.autoencoder,
                                                         shared.probe.model, train.n_classes, cfg)
    times["unconditional"] = time.time() - t
    times["total"] = time.time() - t0
    k = train.n_classes
    report = {
        "accuracy": acc, "n_images": int(len(labels)), "chance": 1 / k,
        "unconditional_accuracy": null_acc, "unconditional_n": n_null,
        "chance_interval_95": evaluation.binomial_interval(n_null, 1 / k),
        "probe_heldout_accuracy": shared.probe.heldout_accuracy, "ae_mse": shared.ae_mse,
        "image_encoder_accuracy": shared.image_encoder_accuracy,
        "final_l_sd": float(np.mean([r[2] for r in ft.log_rows[-20:]])),
        "final_l_clip": float(np.mean([r[3] for r in ft.log_rows[-20:]])),
        "seconds": {k2: round(v, 1) for k2, v in times.items()},
    }
    (args.out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report, indent=1))


if __name__ == "__main__":
    main()
