"""Two-class mIoU and pixel F1 (edited pixels are the positive class)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np


class MissingSampleError(KeyError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _iou(inter: int, union: int) -> float:
    # a class absent from both masks is a perfect match
    return 1.0 if union == 0 else inter / union


def class_ious(c: ConfusionCounts) -> tuple[float, float]:
    """(edited IoU, authentic IoU)."""
    return _iou(c.tp, c.tp + c.fp + c.fn), _iou(c.tn, c.tn + c.fn + c.fp)


def miou(c: ConfusionCounts) -> float:
    e, a = class_ious(c)
    return (e + a) / 2.0


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    p = 1.0 if c.tp + c.fp == 0 else c.tp / (c.tp + c.fp)
    r = 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)
    return p, r


def f1(c: ConfusionCounts) -> float:
    if c.tp == 0:
        return 1.0 if c.fp + c.fn == 0 else 0.0
    p, r = precision_recall(c)
    return 2 * p * r / (p + r)


@dataclass
class ImageMetrics:
    id: str
    iou_edited: float
    iou_authentic: float
    miou: float
    precision: float
    recall: float
    f1: float


def image_metrics(sample_id: str, pred, gt) -> ImageMetrics:
    c = confusion(pred, gt)
    e, a = class_ious(c)
    p, r = precision_recall(c)
    return ImageMetrics(sample_id, e, a, (e + a) / 2.0, p, r, f1(c))


@dataclass
class MetricsReport:
    split: str
    per_image: list[ImageMetrics]
    aggregate: dict[str, float]
    mode: str = "per-image"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "mode": self.mode,
            "aggregate": self.aggregate,
            "extra": self.extra,
            "per_image": [asdict(m) for m in self.per_image],
        }


_FIELDS = ("iou_edited", "iou_authentic", "miou", "precision", "recall", "f1")


def evaluate_split(
    predictions: Mapping[str, np.ndarray],
    gts: Mapping[str, np.ndarray],
    split: str = "",
    mode: str = "per-image",
) -> MetricsReport:
    """Per-image metrics sorted by id plus split aggregates.

    ``mode="per-image"`` averages per-image values; ``mode="pooled"`` sums
    confusion counts over the split first and reports metrics of the pooled
    counts (per-image records are still included).
    """
    missing = set(gts) - set(predictions)
    extra_ids = set(predictions) - set(gts)
    if missing or extra_ids:
        raise MissingSampleError(f"id mismatch: missing {sorted(missing)}, unexpected {sorted(extra_ids)}")
    if mode not in ("per-image", "pooled"):
        raise ValueError(f"unknown reduction mode {mode!r}")
    ids = sorted(gts)
    per_image = [image_metrics(i, predictions[i], gts[i]) for i in ids]
    if mode == "per-image":
        agg = {k: float(np.mean([getattr(m, k) for m in per_image])) if per_image else 0.0 for k in _FIELDS}
    else:
        counts = [confusion(predictions[i], gts[i]) for i in ids]
        pooled = ConfusionCounts(*(sum(getattr(c, f) for c in counts) for f in ("tp", "fp", "fn", "tn")))
        e, a = class_ious(pooled)
        p, r = precision_recall(pooled)
        agg = {"iou_edited": e, "iou_authentic": a, "miou": (e + a) / 2, "precision": p, "recall": r, "f1": f1(pooled)}
    return MetricsReport(split, per_image, agg, mode)
