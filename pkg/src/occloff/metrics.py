"""Confusion-matrix IoU / mIoU over occupancy grids."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .synthdata import N_CLASSES


def confusion_matrix(pred, gt, n_categories: int = N_CLASSES + 1) -> np.ndarray:
    """(n, n) counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return np.bincount(gt * n_categories + pred, minlength=n_categories ** 2).reshape(n_categories, n_categories)


@dataclass
class IoUReport:
    iou: float  # occupied / empty split
    per_class: dict[int, float]  # semantic categories that count towards the mean
    miou: float

    def to_dict(self) -> dict:
        return {"iou": self.iou, "miou": self.miou, "per_class": {str(k): v for k, v in self.per_class.items()}}


def iou_from_confusion(cm: np.ndarray) -> IoUReport:
    """Semantic categories absent from both prediction and ground truth are skipped."""
    cm = np.asarray(cm, dtype=np.int64)
    # binary split: category 0 is empty
    tp_occ = cm[1:, 1:].sum()
    fp_occ = cm[0, 1:].sum()
    fn_occ = cm[1:, 0].sum()
    denom = tp_occ + fp_occ + fn_occ
    iou = float(tp_occ / denom) if denom else 1.0
    exact = {}
    for c in range(1, cm.shape[0]):
        tp = int(cm[c, c])
        union = int(cm[:, c].sum() + cm[c, :].sum()) - tp
        if union:
            exact[c] = Fraction(tp, union)
    per_class = {c: float(v) for c, v in exact.items()}
    # exact rational mean, rounded once, so the result does not depend on summation order
    miou = float(sum(exact.values()) / len(exact)) if exact else 1.0
    return IoUReport(iou, per_class, miou)


def evaluate_grids(pairs, n_categories: int = N_CLASSES + 1) -> IoUReport:
    """Accumulate one confusion matrix over (prediction, ground truth) pairs."""
    cm = np.zeros((n_categories, n_categories), dtype=np.int64)
    for pred, gt in pairs:
        cm += confusion_matrix(pred, gt, n_categories)
    return iou_from_confusion(cm)
