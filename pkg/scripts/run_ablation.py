"""Run an ablation grid on the synthetic desk corpus and print the table.

    python3 scripts/run_ablation.py --out runs/ablation [--grid scripts/table1.json] [--set key=value ...]

The default grid is the reduced one (rows Full, 1, 3, 5, 6, 7, 12, 13, 14).
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from eegdiff import eval as evaluation
from eegdiff.cli import parse_assignment
from eegdiff.config import RunConfig
from eegdiff.signal import generate_synthetic_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--grid", type=Path, help="JSON list of row ids")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = RunConfig().update(dict(parse_assignment(s) for s in args.set))
    grid = json.loads(args.grid.read_text()) if args.grid else list(evaluation.DEFAULT_GRID)
    corpus = generate_synthetic_corpus(cfg.data, cfg.seed)
    run = evaluation.run_ablation(grid, corpus, cfg, args.out)
    n = max((r.n_images for r in run.rows), default=0)
    print(f"{'row':>5} {'msm':>4} {'clip':>5} {'mask':>5} {'groups':>7} {'params':>8} {'acc':>6} {'se':>6}")
    for r in run.rows:
        g = r.row
        se = evaluation.binomial_se(r.accuracy, n) if r.error is None and n else float("nan")
        mask = "-" if g.mask_ratio is None else f"{g.mask_ratio:.2f}"
        print(f"{g.row_id:>5} {int(g.msm):>4} {int(g.clip):>5} {mask:>5} {g.groups:>7} {r.params:>8} "
              f"{r.accuracy:>6.3f} {se:>6.3f}")
    print(f"table written to {args.out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
