"""Brute-force reference values for the 12-sample metrics fixture.

Pure Python: argmax by scan, confusion counts by loop, AUC as the
tie-aware pairwise win rate in exact fractions. Run as a script to refresh
tests/golden/metrics_12_golden.json.
"""

import json
import sys
from fractions import Fraction
from pathlib import Path

CLASSES = ["healthy", "multiple_diseases", "rust", "scab"]

# rows sum to 1; several deliberate ties within columns and one argmax tie (row 9)
SCORES = [
    [0.70, 0.10, 0.10, 0.10],
    [0.40, 0.30, 0.20, 0.10],
    [0.25, 0.25, 0.25, 0.25],
    [0.10, 0.60, 0.20, 0.10],
    [0.20, 0.40, 0.30, 0.10],
    [0.30, 0.30, 0.10, 0.30],
    [0.05, 0.15, 0.70, 0.10],
    [0.10, 0.10, 0.40, 0.40],
    [0.20, 0.10, 0.60, 0.10],
    [0.10, 0.10, 0.40, 0.40],
    [0.10, 0.20, 0.10, 0.60],
    [0.30, 0.10, 0.10, 0.50],
]
TRUTH = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]


def argmax_first(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = Fraction(0)
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1
            elif a == b:
                wins += Fraction(1, 2)
    return wins / (len(pos) * len(neg))


def golden():
    c = len(CLASSES)
    preds = [argmax_first(r) for r in SCORES]
    confusion = [[0] * c for _ in range(c)]
    for t, p in zip(TRUTH, preds):
        confusion[t][p] += 1
    correct = sum(1 for t, p in zip(TRUTH, preds) if t == p)
    aucs = []
    for k in range(c):
        column = [r[k] for r in SCORES]
        aucs.append(pairwise_auc(column, [t == k for t in TRUTH]))
    per_class = [float(a) for a in aucs]
    return {
        "classes": CLASSES,
        "scores": SCORES,
        "truth": TRUTH,
        "accuracy": correct / len(TRUTH),
        "confusion": confusion,
        "per_class_auc": per_class,
        "per_class_auc_exact": [f"{a.numerator}/{a.denominator}" for a in aucs],
        "macro_auc": sum(per_class) / len(per_class),
    }


if __name__ == "__main__":
    text = json.dumps(golden(), indent=2) + "\n"
    if len(sys.argv) > 1:
        Path(sys.argv[1]).write_text(text)
    sys.stdout.write(text)
