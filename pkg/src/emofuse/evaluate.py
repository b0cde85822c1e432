"""Confusion matrices and macro-averaged classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    # set when some class had a 0/0 precision, recall or F1
    zero_division: bool = False

    def as_row(self):
        return (self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1)


def confusion_matrix(predictions, labels, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ValueError("empty prediction set")
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions but {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} class index outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy plus precision/recall/F1 averaged over classes present in the labels.

    Any 0/0 ratio counts as 0 and sets ``zero_division``.
    """
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total < 1:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    present = rows > 0
    flagged = False

    precision = np.zeros_like(diag)
    ok = cols > 0
    precision[ok] = diag[ok] / cols[ok]
    flagged |= bool(np.any(present & ~ok))

    recall = np.zeros_like(diag)
    recall[present] = diag[present] / rows[present]

    denom = precision + recall
    f1 = np.zeros_like(diag)
    ok = denom > 0
    f1[ok] = 2 * precision[ok] * recall[ok] / denom[ok]
    flagged |= bool(np.any(present & ~ok))

    return Metrics(
        accuracy=float(diag.sum() / total),
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
        zero_division=flagged,
    )


def score(predictions, labels, num_classes: int) -> Metrics:
    return compute_metrics(confusion_matrix(predictions, labels, num_classes))
