"""Confusion matrices, TPR/FPR, one-vs-rest ROC curves and AUC."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = samples of true class i predicted as class j."""

    counts: np.ndarray
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.num_classes)]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c, :].sum()) - self.tp(c)

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum()) - self.tp(c)

    def tn(self, c: int) -> int:
        return self.total - self.tp(c) - self.fp(c) - self.fn(c)


def confusion_matrix(pred, truth, num_classes: int, class_names=None) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractError(f"{len(pred)} predictions for {len(truth)} labels")
    if pred.size == 0:
        raise ContractError("confusion matrix of an empty sample")
    for name, ids in (("prediction", pred), ("label", truth)):
        if ids.min() < 0 or ids.max() >= num_classes:
            raise IndexError(f"{name} id out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


class Rates(NamedTuple):
    tpr: float
    fpr: float
    tpr_defined: bool
    fpr_defined: bool


def tpr_fpr(cm: ConfusionMatrix, class_id: int) -> Rates:
    """TP/(TP+FN) and FP/(FP+TN) for one class; an empty denominator gives 0, flagged."""
    if not 0 <= class_id < cm.num_classes:
        raise IndexError(f"class id {class_id} out of range [0, {cm.num_classes})")
    tp, fn, fp, tn = cm.tp(class_id), cm.fn(class_id), cm.fp(class_id), cm.tn(class_id)
    pos, neg = tp + fn, fp + tn
    return Rates(tp / pos if pos else 0.0, fp / neg if neg else 0.0, pos > 0, neg > 0)


class RocPoint(NamedTuple):
    threshold: float
    fpr: float
    tpr: float
    fp: int
    tp: int


@dataclass
class RocCurve:
    points: List[RocPoint]
    n_pos: int
    n_neg: int
    class_id: Optional[int] = None

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p.fpr for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p.tpr for p in self.points])

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([p.threshold for p in self.points])


class DegenerateCurveError(ContractError):
    pass


def roc_curve(scores, truth, class_id: Optional[int] = None) -> RocCurve:
    """One-vs-rest ROC curve.

    Thresholds run over the distinct scores in descending order; a sample is
    predicted positive when ``score >= threshold``. The curve is bracketed by a
    ``+inf`` sentinel at (0, 0) and a ``-inf`` sentinel at (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth).reshape(-1).astype(bool)
    if scores.shape != truth.shape:
        raise ContractError(f"{len(scores)} scores for {len(truth)} labels")
    n_pos = int(truth.sum())
    n_neg = int(truth.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCurveError("ROC needs at least one positive and one negative sample")

    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], truth[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])

    points = [RocPoint(math.inf, 0.0, 0.0, 0, 0)]
    for i in ends:
        fp, tp = int(fps[i]), int(tps[i])
        points.append(RocPoint(float(s[i]), fp / n_neg, tp / n_pos, fp, tp))
    points.append(RocPoint(-math.inf, 1.0, 1.0, n_neg, n_pos))
    return RocCurve(points, n_pos, n_neg, class_id)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve.

    Integer TP/FP counts are summed exactly before one final division, so the
    result is the correctly rounded area.
    """
    doubled = 0
    for a, b in zip(curve.points[:-1], curve.points[1:]):
        doubled += (b.fp - a.fp) * (a.tp + b.tp)
    return doubled / (2 * curve.n_pos * curve.n_neg)


@dataclass
class MetricsReport:
    accuracy: float
    confusion: ConfusionMatrix
    per_class_auc: List[Optional[float]]
    macro_auc: Optional[float]
    excluded_classes: List[int]
    curves: List[Optional[RocCurve]]

    @property
    def class_names(self) -> List[str]:
        return self.confusion.class_names

    def to_text(self) -> str:
        names = self.class_names
        width = max(len(n) for n in names)
        lines = [f"samples {self.confusion.total}", f"accuracy {self.accuracy:.3f}"]
        for name, value in zip(names, self.per_class_auc):
            shown = "n/a (class absent or all-positive)" if value is None else f"{value:.3f}"
            lines.append(f"auc[{name}] {shown}")
        lines.append("macro_auc " + ("n/a" if self.macro_auc is None else f"{self.macro_auc:.3f}"))
        lines.append("confusion (rows = truth, columns = prediction)")
        lines.append(" " * (width + 1) + " ".join(f"{n:>{width}}" for n in names))
        for name, row in zip(names, self.confusion.counts):
            lines.append(f"{name:>{width}} " + " ".join(f"{v:>{width}d}" for v in row))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        w.writerow(["accuracy", "", repr(self.accuracy)])
        for name, value in zip(self.class_names, self.per_class_auc):
            w.writerow(["auc", name, "" if value is None else repr(value)])
        w.writerow(["macro_auc", "", "" if self.macro_auc is None else repr(self.macro_auc)])
        for i, name in enumerate(self.class_names):
            for j, pred_name in enumerate(self.class_names):
                w.writerow(["confusion", f"{name}->{pred_name}", int(self.confusion.counts[i, j])])
        return buf.getvalue()


def roc_to_csv(curve: RocCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fpr", "tpr"])
    for p in curve.points:
        w.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])
    return buf.getvalue()


def report(scores, truth, num_classes: int, class_names: Sequence[str] = ()) -> MetricsReport:
    """Accuracy via argmax (ties to the lowest index), one-vs-rest ROC/AUC per class and macro AUC.

    Classes with no positive or no negative sample get ``None`` for their AUC
    and are left out of the macro mean; they are listed in ``excluded_classes``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ContractError(f"need a non-empty [N, C] score matrix, got shape {scores.shape}")
    if scores.shape[1] != num_classes:
        raise ContractError(f"score matrix has {scores.shape[1]} columns for {num_classes} classes")
    if scores.shape[0] != truth.shape[0]:
        raise ContractError(f"{scores.shape[0]} score rows for {truth.shape[0]} labels")
    if not np.allclose(scores.sum(axis=1), 1.0, rtol=0, atol=1e-5):
        raise ContractError("score rows must sum to 1 within 1e-5")

    pred = scores.argmax(axis=1)
    cm = confusion_matrix(pred, truth, num_classes, class_names)
    per_class, curves, excluded = [], [], []
    for c in range(num_classes):
        positives = truth == c
        if positives.all() or not positives.any():
            per_class.append(None)
            curves.append(None)
            excluded.append(c)
            continue
        curve = roc_curve(scores[:, c], positives, class_id=c)
        curves.append(curve)
        per_class.append(auc(curve))
    present = [a for a in per_class if a is not None]
    macro = sum(present) / len(present) if present else None
    return MetricsReport(cm.accuracy, cm, per_class, macro, excluded, curves)
