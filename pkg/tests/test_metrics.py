from fractions import Fraction

import numpy as np
import pytest

from occloff.metrics import confusion_matrix, evaluate_grids, iou_from_confusion


def brute_force(pred, gt, n=9):
    pred, gt = pred.ravel(), gt.ravel()
    tp = fp = fn = 0
    for p, g in zip(pred, gt):
        tp += p > 0 and g > 0
        fp += p > 0 and g == 0
        fn += p == 0 and g > 0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    per = {}
    for c in range(1, n):
        a = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        b = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
        if b:
            per[c] = Fraction(a, b)
    miou = float(sum(per.values()) / len(per)) if per else 1.0
    return iou, {c: float(v) for c, v in per.items()}, miou


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 9, size=(4, 4, 2))
    r = evaluate_grids([(gt, gt)])
    assert r.iou == 1.0 and r.miou == 1.0


def test_all_empty_prediction():
    gt = np.zeros((4, 4, 2), int)
    gt[0, 0, 0] = 3
    assert evaluate_grids([(np.zeros_like(gt), gt)]).iou == 0.0


def test_four_voxel_case():
    gt = np.array([1, 1, 0, 2])
    pred = np.array([1, 0, 1, 2])
    r = iou_from_confusion(confusion_matrix(pred, gt))
    assert r.per_class[1] == pytest.approx(1 / 3)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(3), np.zeros(4))


def test_matches_brute_force_small_grids():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt = rng.integers(0, 9, size=(8, 8, 4))
        pred = np.where(rng.random(gt.shape) < 0.6, gt, rng.integers(0, 9, size=gt.shape))
        r = evaluate_grids([(pred, gt)])
        iou, per, miou = brute_force(pred, gt)
        assert r.iou == iou and r.per_class == per and r.miou == miou
