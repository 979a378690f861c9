"""Full-data run on the apple-leaf corpus. Not part of CI.

The desk-scale test suite stands in for the published 93.765% top-1 figure,
which depends on the full 3642-image corpus, large-corpus pretrained weights
and hyperparameters that were never reported. This harness is the documented
way to attempt it: it drives the CLI through split, import, fine-tune and
evaluate, then checks test accuracy against a target of 0.90.

Inputs:
  --images   directory of <image_id>.jpg files (Pillow needed for JPEG)
  --labels   one-hot CSV with header image_id,healthy,multiple_diseases,rust,scab
  --weights  LFNT backbone, e.g. produced by convert_torchvision_weights.py
             followed by `leafnet import-weights`

Expect many hours of CPU time at 224x224: every conv is numpy im2col.
Lower --resolution for a quicker, less faithful run.

    python3 demos/full_dataset_harness.py --images data/images \
        --labels data/train.csv --weights weights/pretrained.lfnt --work runs/full
"""

import argparse
import sys
from pathlib import Path

from leafnet import cli

TARGET = 0.90


def run(argv):
    print("$ leafnet " + " ".join(argv), flush=True)
    code = cli.main(argv)
    if code != cli.EXIT_OK:
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser(description="full-data fine-tune and evaluation")
    parser.add_argument("--images", required=True)
    parser.add_argument("--labels", required=True)
    parser.add_argument("--weights", required=True)
    parser.add_argument("--work", default="runs/full")
    parser.add_argument("--resolution", type=int, default=224)
    parser.add_argument("--phase1-epochs", type=int, default=1)
    parser.add_argument("--phase2-epochs", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    run(["split", "--labels", args.labels, "--fraction", "0.2", "--seed", str(args.seed),
         "--out", str(work / "split.txt")])
    run(["train", "--images", args.images, "--labels", args.labels, "--manifest", str(work / "split.txt"),
         "--pretrained", args.weights, "--out-checkpoint", str(work / "model.lfnt"),
         "--report", str(work / "epochs.csv"), "--resolution", str(args.resolution),
         "--phase1-epochs", str(args.phase1_epochs), "--phase2-epochs", str(args.phase2_epochs),
         "--seed", str(args.seed)])
    run(["evaluate", "--checkpoint", str(work / "model.lfnt"), "--images", args.images,
         "--labels", args.labels, "--manifest", str(work / "split.txt"),
         "--resolution", str(args.resolution), "--out-dir", str(work / "eval")])

    metrics = dict(line.split(" ", 1) for line in (work / "eval" / "metrics.txt").read_text().splitlines()[:2])
    accuracy = float(metrics["accuracy"])
    verdict = "reached" if accuracy >= TARGET else "missed"
    print(f"test accuracy {accuracy:.3f}: {verdict} the {TARGET:.2f} target")
    return 0 if accuracy >= TARGET else 4


if __name__ == "__main__":
    sys.exit(main())
