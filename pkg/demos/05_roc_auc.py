"""One-vs-rest ROC curves and AUC for a 4-class score matrix.

Run: python3 demos/05_roc_auc.py
"""

import numpy as np

from leafnet import metrics

names = ["healthy", "multiple_diseases", "rust", "scab"]
rng = np.random.default_rng(7)
truth = rng.integers(0, 4, 60)
logits = rng.normal(0, 1, (60, 4))
logits[np.arange(60), truth] += 1.5
scores = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)

rep = metrics.report(scores, truth, 4, names)
print(rep.to_text(), end="")

# A curve is a list of (threshold, fpr, tpr) points swept with the ">=" rule.
curve = metrics.roc_curve(scores[:, 2], truth == 2)
print(f"rust curve has {len(curve.points)} points; first {curve.points[0]}, last {curve.points[-1]}")

# The trapezoid area equals the Mann-Whitney probability that a random positive outranks a random negative.
pos, neg = scores[truth == 2, 2], scores[truth != 2, 2]
pairwise = ((pos[:, None] > neg).sum() + 0.5 * (pos[:, None] == neg).sum()) / (len(pos) * len(neg))
print(f"trapezoid AUC {metrics.auc(curve):.6f}, pairwise {pairwise:.6f}")

print("roc CSV preview:\n" + "\n".join(metrics.roc_to_csv(curve).splitlines()[:4]))
