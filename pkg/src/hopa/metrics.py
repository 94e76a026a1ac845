"""Confusion matrices and mean intersection-over-union."""

from __future__ import annotations

import numpy as np

__all__ = ["ConfusionMatrix", "miou"]


class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns are predictions.

    Pixels whose ground-truth label equals ``ignore_label`` are skipped.
    """

    def __init__(self, num_classes: int, ignore_label: int = 255):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray):
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
        keep = gt != self.ignore_label
        pred, gt = pred[keep], gt[keep]
        bad = (gt < 0) | (gt >= self.num_classes)
        if bad.any():
            raise ValueError(
                f"ground-truth label {int(gt[bad][0])} outside [0, {self.num_classes}) "
                f"and not ignore ({self.ignore_label})"
            )
        if ((pred < 0) | (pred >= self.num_classes)).any():
            raise ValueError(f"prediction outside [0, {self.num_classes})")
        idx = gt * self.num_classes + pred
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """(per-class IoU, mean).

    IoU_k = diag_k / (row_k + col_k - diag_k).  Classes that appear in neither
    ground truth nor predictions have IoU NaN and are excluded from the mean.
    An all-empty matrix (no pixels ever accumulated) is an error.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty: no non-ignored pixels were accumulated")
    diag = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class = np.full(cm.num_classes, np.nan)
    valid = denom > 0
    per_class[valid] = diag[valid] / denom[valid]
    return per_class, float(np.nanmean(per_class))
