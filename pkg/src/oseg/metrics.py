"""Confusion-matrix scores and connected-component building counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import IGNORE_INDEX


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = pixels with truth ``i`` predicted as ``j``."""

    k: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.k, self.k), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.k != other.k:
            raise ValueError(f"cannot merge {self.k}-class and {other.k}-class matrices")
        return ConfusionMatrix(self.k, self.counts + other.counts, self.ignored + other.ignored)

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).astype(np.float64)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp


def accumulate_confusion(pred: np.ndarray, truth: np.ndarray, k: int,
                         ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ in shape")
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    for name, arr in (("truth", t), ("pred", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} has class ids outside [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, counts.astype(np.int64), int((~keep).sum()))


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN); NaN where the union is empty."""
    union = cm.tp + cm.fp + cm.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, cm.tp / np.where(union > 0, union, 1), np.nan)


def mean_iou(cm: ConfusionMatrix) -> float:
    ious = iou_per_class(cm)
    valid = ~np.isnan(ious)
    if not valid.any():
        raise ValueError("mean IoU undefined: every class has an empty union")
    return float(ious[valid].mean())


def f1_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class F1 (0 where precision + recall is 0) and the macro mean.

    The macro mean runs over classes that occur in the truth.
    """
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.where(tp + fp > 0, tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.where(tp + fn > 0, tp + fn, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    present = cm.counts.sum(axis=1) > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    return f1, macro


def evaluation_report(cm: ConfusionMatrix, class_names: list[str] | None = None) -> dict:
    ious = iou_per_class(cm)
    f1, macro = f1_scores(cm)
    names = class_names or [str(i) for i in range(cm.k)]
    per_class = {
        names[i]: {"iou": None if np.isnan(ious[i]) else float(ious[i]), "f1": float(f1[i])}
        for i in range(cm.k)
    }
    return {"per_class": per_class, "miou": mean_iou(cm), "macro_f1": macro,
            "ignored_pixels": int(cm.ignored)}


# ---------------------------------------------------------------------------
# connected components

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]),
    8: np.ones((3, 3), dtype=int),
}


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    count: int
    areas: list[int] = field(default_factory=list)


def label_components(mask: np.ndarray, connectivity: int = 8, min_area: int = 0) -> ComponentLabeling:
    """Label foreground components; drop those smaller than ``min_area``.

    Labels are contiguous from 1 in raster order of each component's first
    pixel; 0 is background.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    if min_area > 0 and count:
        keep = areas >= min_area
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[1:][keep] = np.arange(1, int(keep.sum()) + 1)
        labels = remap[labels]
        areas = areas[keep]
        count = int(keep.sum())
    return ComponentLabeling(labels.astype(np.int32), int(count), [int(a) for a in areas])


def count_difference(pred_count: int, truth_count: int) -> dict:
    return {"pred_count": int(pred_count), "truth_count": int(truth_count),
            "difference": int(pred_count) - int(truth_count)}


def building_count_report(pred: np.ndarray, truth: np.ndarray, connectivity: int = 8,
                          min_area: int = 0, building_class: int = 1) -> dict:
    """Count building components in each class mask; difference is pred - truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} differ in shape")
    p = label_components(pred == building_class, connectivity, min_area).count
    t = label_components(truth == building_class, connectivity, min_area).count
    return count_difference(p, t)
