"""Confusion-matrix accumulation and segmentation quality statistics.

For class i with n_i ground-truth points, c_i correct predictions and w_i
points wrongly predicted as i:

    oAcc = sum(c_i) / sum(n_i)
    mAcc = mean over classes of c_i / n_i
    mIoU = mean over classes of c_i / (n_i + w_i)

Classes absent from both truth and prediction are excluded from the two
means (and reported, so results stay auditable); a class that is only ever
predicted contributes an accuracy term of 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts[true class, predicted class]; accumulation is functional."""

    counts: np.ndarray

    @staticmethod
    def zeros(num_classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def per_class(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(n_i, c_i, w_i) vectors."""
        n = self.counts.sum(axis=1)
        c = np.diag(self.counts)
        w = self.counts.sum(axis=0) - c
        return n, c, w


def accumulate(cm: ConfusionMatrix, predicted, truth) -> ConfusionMatrix:
    """Score one batch of points; returns a new matrix, the input is untouched."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValidationError(f"predicted shape {predicted.shape} != truth shape {truth.shape}")
    if predicted.size == 0:
        return cm
    m = cm.num_classes
    for name, arr in (("predicted", predicted), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= m:
            raise ValidationError(f"{name} labels outside [0, {m})")
    counts = cm.counts.copy()
    np.add.at(counts, (truth, predicted), 1)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class SegMetrics:
    oacc: float
    macc: float
    miou: float
    class_acc: dict[int, float]
    class_iou: dict[int, float]
    excluded: tuple[int, ...]


def compute_metrics(cm: ConfusionMatrix) -> SegMetrics:
    if cm.total == 0:
        raise ValidationError("cannot compute metrics from an empty confusion matrix")
    n, c, w = cm.per_class()
    present = np.nonzero(n + w > 0)[0]
    excluded = tuple(int(i) for i in np.nonzero(n + w == 0)[0])
    class_acc, class_iou = {}, {}
    for i in present:
        class_acc[int(i)] = float(c[i] / n[i]) if n[i] > 0 else 0.0
        class_iou[int(i)] = float(c[i] / (n[i] + w[i]))
    return SegMetrics(
        oacc=float(c.sum() / n.sum()),
        macc=float(np.mean(list(class_acc.values()))),
        miou=float(np.mean(list(class_iou.values()))),
        class_acc=class_acc,
        class_iou=class_iou,
        excluded=excluded,
    )


def metrics_report(cm: ConfusionMatrix, metrics: SegMetrics, class_names=None) -> str:
    """CSV with one row per class and a final overall summary row."""
    n, c, w = cm.per_class()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "n", "c", "w", "acc", "iou", "oacc", "macc", "miou"])
    for i in range(cm.num_classes):
        name = class_names[i] if class_names else str(i)
        acc = repr(metrics.class_acc[i]) if i in metrics.class_acc else ""
        iou = repr(metrics.class_iou[i]) if i in metrics.class_iou else ""
        writer.writerow([name, int(n[i]), int(c[i]), int(w[i]), acc, iou, "", "", ""])
    writer.writerow(
        ["overall", int(n.sum()), int(c.sum()), int(w.sum()), "", "", repr(metrics.oacc), repr(metrics.macc), repr(metrics.miou)]
    )
    return buf.getvalue()
