"""Confusion matrices, per-class Dice, mDice/MiDice and cluster purity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class MissingTruthError(ValueError):
    pass


def confusion(preds, truths, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(truths)} truths")
    for name, v in (("prediction", preds), ("truth", truths)):
        if np.any(v < 0) or np.any(v >= num_classes):
            raise ValueError(f"{name} outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def per_class_dice(cm: np.ndarray) -> np.ndarray:
    """``2TP / (2TP + FP + FN)`` per class; NaN where the denominator is zero."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, 2 * tp / np.where(den > 0, den, 1), np.nan)


def minor_class(cm: np.ndarray) -> int:
    """Class with the fewest ground-truth samples among those present (lowest index on ties)."""
    support = np.asarray(cm).sum(axis=1)
    present = np.flatnonzero(support > 0)
    if len(present) == 0:
        raise ValueError("empty confusion matrix")
    return int(present[np.argmin(support[present])])


@dataclass
class MetricReport:
    dice: list
    mdice: float
    midice: float
    minor_class: int
    confusion: list = field(default_factory=list)
    purity: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "mdice": self.mdice,
            "midice": self.midice,
            "minor_class": self.minor_class,
            "confusion": self.confusion,
            "purity": self.purity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["dice"], d["mdice"], d["midice"], d["minor_class"], d.get("confusion", []), d.get("purity"))

    def table(self, title: str = "") -> str:
        rows = [("class", "dice")]
        for c, v in enumerate(self.dice):
            tag = " (minor)" if c == self.minor_class else ""
            rows.append((f"{c}{tag}", "undefined" if v is None else f"{v:.4f}"))
        rows.append(("mDice", f"{self.mdice:.4f}"))
        rows.append(("MiDice", f"{self.midice:.4f}"))
        if self.purity is not None:
            rows.append(("purity", f"{self.purity:.4f}"))
        w = max(len(r[0]) for r in rows)
        lines = [title] if title else []
        lines += [f"{a:<{w}}  {b:>9}" for a, b in rows]
        return "\n".join(lines)


def dice(cm, minor: Optional[int] = None) -> MetricReport:
    """Per-class Dice plus their mean over defined classes and the minor-class Dice."""
    cm = np.asarray(cm, dtype=np.int64)
    d = per_class_dice(cm)
    defined = ~np.isnan(d)
    if not np.any(defined):
        raise ValueError("no class has a defined Dice coefficient")
    if minor is None:
        minor = minor_class(cm)
    return MetricReport(
        dice=[None if np.isnan(v) else float(v) for v in d],
        mdice=float(d[defined].mean()),
        midice=float(d[minor]) if defined[minor] else float("nan"),
        minor_class=int(minor),
        confusion=cm.tolist(),
    )


def evaluate(preds, truths, num_classes: int) -> MetricReport:
    return dice(confusion(preds, truths, num_classes))


def f1_scores(cm) -> np.ndarray:
    """Harmonic mean of precision and recall per class (NaN where undefined)."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = tp / cm.sum(axis=0)
        recall = tp / cm.sum(axis=1)
        f1 = 2 * precision * recall / (precision + recall)
    # tp == 0 with some support: precision or recall is 0 (or 0/0), F1 is 0
    support = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    return np.where(support & (tp == 0), 0.0, np.where(support, f1, np.nan))


def purity(assignment, truths, num_classes: Optional[int] = None):
    """Overall purity ``sum_j max_c |cluster_j & class_c| / N`` and per-class purity.

    Per-class purity of ``c`` pools the clusters whose majority class is ``c``
    (ties go to the lower class index); it is NaN when no cluster has majority ``c``.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if assignment.shape != truths.shape:
        raise ValueError("assignment and truths differ in length")
    if len(truths) == 0 or np.any(truths < 0):
        raise MissingTruthError("purity needs ground truth for every clustered sample")
    if num_classes is None:
        num_classes = int(truths.max()) + 1
    k = int(assignment.max()) + 1
    table = np.zeros((k, num_classes), dtype=np.int64)
    np.add.at(table, (assignment, truths), 1)
    sizes = table.sum(axis=1)
    table, sizes = table[sizes > 0], sizes[sizes > 0]
    majority = np.argmax(table, axis=1)
    overall = table.max(axis=1).sum() / len(truths)
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        sel = majority == c
        if np.any(sel):
            per_class[c] = table[sel, c].sum() / sizes[sel].sum()
    return float(overall), per_class
