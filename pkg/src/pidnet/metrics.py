"""Evaluation metrics: confusion-matrix IoU and a tolerance-based boundary
F-score. Pure numpy on integer label maps; nothing here touches the graph."""

from __future__ import annotations

import numpy as np

from .losses import IGNORE_ID, chebyshev_dilate, extract_boundary_gt


def confusion_matrix(pred, gt, num_classes: int,
                     ignore_id: int = IGNORE_ID) -> np.ndarray:
    """K x K counts with true class on rows, predicted class on columns.
    Pixels whose ground truth is the ignore id do not contribute."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != ignore_id
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError("prediction outside [0, num_classes)")
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError("ground truth outside [0, num_classes)")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def iou_per_class(confusion: np.ndarray) -> np.ndarray:
    """Intersection over union per class; NaN where a class never appears in
    either ground truth or prediction."""
    confusion = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def confusion_and_miou(pred, gt, num_classes: int,
                       ignore_id: int = IGNORE_ID):
    """Confusion matrix plus mean IoU over the classes that appear."""
    conf = confusion_matrix(pred, gt, num_classes, ignore_id)
    if conf.sum() == 0:
        raise ValueError("no valid pixels: every ground-truth pixel is ignored")
    ious = iou_per_class(conf)
    return conf, float(np.nanmean(ious))


def mean_iou(pred, gt, num_classes: int, ignore_id: int = IGNORE_ID) -> float:
    return confusion_and_miou(pred, gt, num_classes, ignore_id)[1]


def boundary_f_score(pred, gt, num_classes: int, radius: int = 2,
                     ignore_id: int = IGNORE_ID) -> float:
    """F-measure between predicted and true class boundaries, where a
    boundary pixel counts as matched if the other map has one within the
    Chebyshev radius.

    Boundaries are the un-thickened class edges of each label map; ignored
    ground-truth pixels drop out of both maps so the prediction is never
    penalized there. Returns 1.0 when both maps are boundary-free, 0.0 when
    exactly one is.
    """
    del num_classes
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    masked_pred = np.where(gt == ignore_id, ignore_id, pred)
    pb = extract_boundary_gt(masked_pred, radius=0, ignore_id=ignore_id).astype(bool)
    gb = extract_boundary_gt(gt, radius=0, ignore_id=ignore_id).astype(bool)
    n_pb = int(pb.sum())
    n_gb = int(gb.sum())
    if n_gb == 0:
        return 1.0 if n_pb == 0 else 0.0
    if n_pb == 0:
        return 0.0
    precision = float((pb & chebyshev_dilate(gb, radius)).sum()) / n_pb
    recall = float((gb & chebyshev_dilate(pb, radius)).sum()) / n_gb
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
