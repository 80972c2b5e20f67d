"""Segmentation metrics via an accumulating confusion matrix.

counts[g][p] is the number of pixels with ground truth g predicted as p,
so TP_c = counts[c][c], FN_c = row sum − TP, FP_c = column sum − TP and
IoU_c = TP/(TP+FP+FN). Ground-truth pixels equal to the ignore label are
skipped entirely. Counts are 64-bit integers, ratios 64-bit floats.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_label: int = 255):
        if num_classes < 2:
            raise ContractError(f"need at least 2 classes, got {num_classes}")
        if 0 <= ignore_label < num_classes:
            raise ContractError(f"ignore_label {ignore_label} collides with class range")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        pred = pred.reshape(-1).astype(np.int64)
        gt = gt.reshape(-1).astype(np.int64)
        c = self.num_classes
        keep = gt != self.ignore_label  # ignored pixels constrain neither array
        gt = gt[keep]
        pred = pred[keep]
        if gt.size and (gt.min() < 0 or gt.max() >= c):
            bad = gt[(gt < 0) | (gt >= c)][0]
            raise DataError(f"ground-truth value {bad} outside [0, {c}) and not ignore")
        if pred.size and (pred.min() < 0 or pred.max() >= c):
            bad = pred[(pred < 0) | (pred >= c)][0]
            raise DataError(f"prediction value {bad} outside [0, {c})")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError(
                f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class"
            )
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; classes never seen (zero denominator) come back NaN."""
    if cm.total == 0:
        raise ContractError("metrics on an empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = tp[present] / denom[present]
    return out


def miou(cm: ConfusionMatrix, absent: str = "exclude") -> float:
    """Mean IoU. `absent` picks the zero-denominator convention:
    'exclude' drops those classes from the mean, 'zero' counts them as 0."""
    values = iou(cm)
    if absent == "exclude":
        values = values[~np.isnan(values)]
        if values.size == 0:
            raise ContractError("no class has a defined IoU")
        return float(values.mean())
    if absent == "zero":
        return float(np.nan_to_num(values, nan=0.0).mean())
    raise ContractError(f"unknown absent-class convention {absent!r}")


def global_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("metrics on an empty confusion matrix")
    return float(np.diag(cm.counts).sum() / cm.total)


def render_report(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> str:
    """Aligned per-class IoU table plus mIoU and global accuracy lines."""
    names = class_names or [f"class{i}" for i in range(cm.num_classes)]
    if len(names) != cm.num_classes:
        raise ContractError(f"{len(names)} names for {cm.num_classes} classes")
    values = iou(cm)
    width = max(len(n) for n in names)
    lines = [f"{'class':<{width}}  IoU"]
    for name, v in zip(names, values):
        cell = "   --" if np.isnan(v) else f"{v:.4f}"
        lines.append(f"{name:<{width}}  {cell}")
    lines.append(f"mIoU            {miou(cm):.4f}")
    lines.append(f"global accuracy {global_accuracy(cm):.4f}")
    return "\n".join(lines)
