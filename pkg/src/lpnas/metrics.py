"""Segmentation loss and the deployment-consistent mIoU evaluator.

mIoU follows the on-device evaluation rules: per-class IoU over non-ignored
pixels, classes with empty unions excluded from the mean, scores computed per
image and then averaged across the batch. An image where every class has an
empty union scores 1.0 (it carries no evidence of error).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

__all__ = [
    "IGNORE_LABEL",
    "MetricsError",
    "ConfusionAccumulator",
    "MiouAccumulator",
    "miou",
    "segmentation_loss",
]

IGNORE_LABEL = 255


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionAccumulator:
    """Per-class intersection/union/valid pixel counts for one image.

    Counts are additive: updating with pixel subsets of the same image (or
    merging two accumulators) is equivalent to one whole-image update.
    """

    num_classes: int = 2
    ignore_label: int = IGNORE_LABEL
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.num_classes, dtype=np.int64)
        if self.valid is None:
            self.valid = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, target: np.ndarray) -> "ConfusionAccumulator":
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise MetricsError(f"pred shape {pred.shape} != target shape {target.shape}")
        keep = target != self.ignore_label
        p, t = pred[keep], target[keep]
        for c in range(self.num_classes):
            pc, tcl = p == c, t == c
            self.intersection[c] += int(np.count_nonzero(pc & tcl))
            self.union[c] += int(np.count_nonzero(pc | tcl))
            self.valid[c] += int(np.count_nonzero(tcl))
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(
            num_classes=self.num_classes,
            ignore_label=self.ignore_label,
            intersection=self.intersection + other.intersection,
            union=self.union + other.union,
            valid=self.valid + other.valid,
        )

    def miou(self) -> float:
        included = self.union > 0
        if not included.any():
            return 1.0
        ious = self.intersection[included] / self.union[included]
        return float(ious.mean())


class MiouAccumulator:
    """Streaming per-image mIoU, averaged across images."""

    def __init__(self, num_classes: int = 2, ignore_label: int = IGNORE_LABEL):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.score_sum = 0.0
        self.count = 0

    def update(self, pred_batch: np.ndarray, target_batch: np.ndarray) -> "MiouAccumulator":
        pred_batch = np.asarray(pred_batch)
        target_batch = np.asarray(target_batch)
        if pred_batch.shape != target_batch.shape:
            raise MetricsError(f"pred shape {pred_batch.shape} != target shape {target_batch.shape}")
        if pred_batch.ndim == 2:
            pred_batch, target_batch = pred_batch[None], target_batch[None]
        for pred, target in zip(pred_batch, target_batch):
            acc = ConfusionAccumulator(self.num_classes, self.ignore_label)
            self.score_sum += acc.update(pred, target).miou()
            self.count += 1
        return self

    def result(self) -> float:
        if self.count == 0:
            raise MetricsError("no images accumulated")
        return self.score_sum / self.count


def miou(pred_labels: np.ndarray, target_labels: np.ndarray, ignore_label: int = IGNORE_LABEL,
         num_classes: int = 2) -> float:
    """Batch mIoU: per-image mean IoU over non-empty classes, then the mean
    over images. Accepts (H,W) or (N,H,W) label grids."""
    return MiouAccumulator(num_classes, ignore_label).update(pred_labels, target_labels).result()


def segmentation_loss(logits: Tensor, target: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean pixelwise cross-entropy over non-ignored pixels."""
    if logits.data.ndim != 4:
        raise MetricsError(f"logits must be (N,C,H,W), got {logits.shape}")
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise MetricsError(f"target shape {target.shape} != {(n, h, w)}")
    keep = target != ignore_label
    n_valid = int(np.count_nonzero(keep))
    if n_valid == 0:
        raise MetricsError("all pixels ignored")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + zmax
    log_probs = z - logsumexp  # (N,C,H,W)

    tclip = np.where(keep, target, 0).astype(np.int64)
    picked = np.take_along_axis(log_probs, tclip[:, None], axis=1)[:, 0]
    loss_val = -(picked * keep).sum() / n_valid
    out = Tensor(np.asarray(loss_val, dtype=z.dtype))

    def backward(g: np.ndarray) -> None:
        probs = np.exp(log_probs)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, tclip[:, None], 1.0, axis=1)
        grad = (probs - onehot) * keep[:, None] / n_valid
        tc.accumulate_grad(logits, (g * grad).astype(z.dtype, copy=False))

    return tc.record_op(out, (logits,), backward)
