"""Segmentation quality metrics and the scalar search reward.

The reward is the geometric mean of mean IoU, frequency-weighted IoU and
mean pixel accuracy over a confusion matrix. Label value 255 is ignored;
classes absent from the labels are excluded from the class means.
"""

from __future__ import annotations

import numpy as np

IGNORE_LABEL = 255


class MetricError(ValueError):
    """Raised for invalid label/prediction values or empty matrices."""


class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predictions."""

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise MetricError(f"need at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, labels: np.ndarray, preds: np.ndarray) -> "ConfusionMatrix":
        labels = np.asarray(labels).ravel()
        preds = np.asarray(preds).ravel()
        if labels.shape != preds.shape:
            raise MetricError(
                f"labels {labels.shape} vs preds {preds.shape}")
        c = self.n_classes
        if ((preds < 0) | (preds >= c)).any():
            raise MetricError("prediction outside [0, n_classes)")
        keep = labels != IGNORE_LABEL
        lk = labels[keep]
        if ((lk < 0) | (lk >= c)).any():
            raise MetricError("label outside [0, n_classes) and not ignore")
        self.counts += np.bincount(
            c * lk.astype(np.int64) + preds[keep], minlength=c * c
        ).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise MetricError("class count mismatch in merge")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def _per_class(self):
        if self.total() == 0:
            raise MetricError("no scored pixels")
        tp = np.diag(self.counts).astype(np.float64)
        row = self.counts.sum(axis=1).astype(np.float64)   # TP + FN
        col = self.counts.sum(axis=0).astype(np.float64)   # TP + FP
        present = row > 0
        union = row + col - tp
        iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
        acc = np.divide(tp, row, out=np.zeros_like(tp), where=present)
        freq = row / row.sum()
        return iou, acc, freq, present


def miou(cm: ConfusionMatrix) -> float:
    iou, _, _, present = cm._per_class()
    return float(iou[present].mean())


def fwiou(cm: ConfusionMatrix) -> float:
    iou, _, freq, present = cm._per_class()
    return float((freq[present] * iou[present]).sum())


def macc(cm: ConfusionMatrix) -> float:
    _, acc, _, present = cm._per_class()
    return float(acc[present].mean())


def reward(cm: ConfusionMatrix) -> float:
    return float((miou(cm) * fwiou(cm) * macc(cm)) ** (1.0 / 3.0))


def metrics_report(cm: ConfusionMatrix) -> dict:
    """The {miou, fwiou, macc, reward} record emitted per evaluation."""
    return {"miou": miou(cm), "fwiou": fwiou(cm), "macc": macc(cm),
            "reward": reward(cm)}
