"""Confusion-matrix based segmentation scores."""

from __future__ import annotations

import numpy as np

from .errors import DataError, UndefinedMetricError

IGNORE_INDEX = 255


def confusion_matrix(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred, gt, ignore_index=IGNORE_INDEX):
    """Return ``cm`` plus counts of ``(true, predicted)`` pairs; ignore pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    c = cm.shape[0]
    keep = gt != ignore_index
    t, p = gt[keep].astype(np.int64), pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
        raise DataError(f"class index outside [0, {c})")
    return cm + np.bincount(t * c + p, minlength=c * c).reshape(c, c)


def per_class_iou(cm):
    """IoU per class; NaN where a class is absent from both prediction and truth."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm):
    if np.sum(cm) == 0:
        raise UndefinedMetricError("no evaluated pixels")
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm):
    total = np.sum(cm)
    if total == 0:
        raise UndefinedMetricError("no evaluated pixels")
    return float(np.trace(cm) / total)


def report(cm):
    """JSON-ready summary; absent classes appear as ``null`` in ``per_class_iou``."""
    ious = per_class_iou(cm)
    return {
        "miou": miou(cm),
        "accuracy": pixel_accuracy(cm),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in ious],
    }
