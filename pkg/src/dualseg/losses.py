"""Segmentation losses and metrics: BCE, soft/hard IoU and median/IQR summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, clip, log

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class LossValue:
    """Components of the training loss; ``total`` is ``bce + iou_loss``."""

    bce: Tensor
    iou_loss: Tensor
    total: Tensor

    def as_dict(self) -> dict:
        return {
            "loss_bce": float(self.bce.item()),
            "loss_iou": float(self.iou_loss.item()),
            "loss_total": float(self.total.item()),
        }


def as_mask(x) -> np.ndarray:
    """Coerce a mask-like array (bool, 0/255 ints, 0/1 floats) to bool."""
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if np.issubdtype(x.dtype, np.integer):
        return x > 0
    return x > 0.5


def _check_same_shape(a, b, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def bce_loss(pred: Tensor, gt) -> Tensor:
    """Mean per-pixel binary cross-entropy with log terms on the prediction.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before the logarithm.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(gt, dtype=pred.dtype)
    _check_same_shape(pred, gt, "bce_loss")
    p = clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    per_pixel = gt * log(p) + (1.0 - gt) * log(1.0 - p)
    return -per_pixel.mean()


def soft_iou_loss(pred: Tensor, gt) -> Tensor:
    """``1 - TP/(TP+FP+FN)`` with counts replaced by probability mass.

    Reduces to the hard IoU loss when ``pred`` is binary. When both the
    prediction and the ground truth are empty the loss is 0.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(gt, dtype=pred.dtype)
    _check_same_shape(pred, gt, "soft_iou_loss")
    tp = (pred * gt).sum()
    fp = (pred * (1.0 - gt)).sum()
    fn = ((1.0 - pred) * gt).sum()
    denom = tp + fp + fn
    if denom.item() == 0:
        return 0.0 * denom
    return 1.0 - tp / denom


def total_loss(pred: Tensor, gt) -> LossValue:
    bce = bce_loss(pred, gt)
    iou = soft_iou_loss(pred, gt)
    return LossValue(bce=bce, iou_loss=iou, total=bce + iou)


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    p, g = as_mask(pred_mask), as_mask(gt_mask)
    _check_same_shape(p, g, "confusion_counts")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou_score(pred_mask, gt_mask) -> float:
    """Hard IoU ``TP/(TP+FP+FN)``; two empty masks score 1.0."""
    c = confusion_counts(pred_mask, gt_mask)
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def median_iqr(values: Sequence[float]) -> Tuple[float, float]:
    """Median and interquartile range (linear-interpolation quantiles)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("median_iqr needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q3 - q1)
