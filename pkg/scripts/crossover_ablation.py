#!/usr/bin/env python3
"""Crossover/audio ablation at the pinned experiment budget.

Generates the synthetic dataset on disk (if missing) and runs the `ablate`
CLI, which trains the full, no-crossover and no-audio variants from identical
initial weights and writes report.txt, report.json and loss_curves.png.
"""

import argparse
import sys
from pathlib import Path

from avseg.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dataset", type=Path, default=Path("runs/ablation_data"))
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--train-clips", type=int, default=200)
    ap.add_argument("--val-clips", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = args.out / "experiment.cfg"
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.write_text(
        "data.seed = 1\n"
        "data.exclusive_groups = [[0, 1]]\n"
        "train.epochs = 60\n"
        "train.lr_milestones = [45, 54]\n"
        "train.base_lr = 0.002\n"
        "train.warmup_iters = 300\n"
        "train.batch_clips = 8\n"
    )

    if not (args.dataset / "manifest.json").exists():
        rc = cli_main(["generate", "--config", str(cfg), "--out", str(args.dataset),
                       "--clips", str(args.train_clips),
                       "--val-clips", str(args.val_clips)])
        if rc != 0:
            return rc
    return cli_main(["ablate", "--config", str(cfg), "--dataset", str(args.dataset),
                     "--out", str(args.out), "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
