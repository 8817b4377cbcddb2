"""Trimap evaluation: pixel accuracy, per-class IoU/mIoU, and run aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NUM_TRIMAP_CLASSES = 3
CLASS_NAMES = ("fg", "bg", "unknown")


@dataclass
class ConfusionCounts:
    """3x3 joint histogram; entry (t, p) counts pixels with truth t predicted p."""

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((NUM_TRIMAP_CLASSES, NUM_TRIMAP_CLASSES), dtype=np.int64)
    )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.counts + other.counts)


def accumulate(pred, truth, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add the per-pixel joint histogram of (truth, pred) to ``counts``.

    Associative across images: accumulating A then B equals accumulating the
    concatenation. Arrays must have identical shapes and values in {0,1,2}.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if counts is None:
        counts = ConfusionCounts()
    n = NUM_TRIMAP_CLASSES
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= n or truth.min(initial=0) < 0 or truth.max(initial=0) >= n:
        raise ValueError("labels must lie in {0, 1, 2}")
    joint = np.bincount(
        (truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()), minlength=n * n
    ).reshape(n, n)
    counts.counts += joint
    return counts


@dataclass
class MetricsReport:
    """Percent-scale metrics for one evaluation.

    ``per_class_iou`` holds one entry per class in order (fg, bg, unknown);
    classes absent from both truth and prediction carry None and are
    excluded from the mIoU mean (their names are listed in
    ``excluded_classes``). ``per_class_precision`` is logged alongside so
    the looser correct-over-predicted reading of the mean is inspectable.
    """

    accuracy: float
    miou: float
    per_class_iou: tuple
    per_class_precision: tuple
    n_pixels: int
    excluded_classes: tuple = ()

    def as_row(self) -> dict:
        iou = self.per_class_iou
        return {
            "accuracy": self.accuracy,
            "miou": self.miou,
            "iou_fg": iou[0],
            "iou_bg": iou[1],
            "iou_unknown": iou[2],
        }


def miou(counts: ConfusionCounts, count_unknown_in_accuracy: bool = True) -> MetricsReport:
    """Accuracy and per-class intersection-over-union from a confusion matrix.

    IoU_c = TP_c / (TP_c + FP_c + FN_c); classes with zero denominator are
    excluded from the mean. Accuracy is trace/total, by default over all
    pixels including the unknown class (set ``count_unknown_in_accuracy``
    False to score only fg/bg pixels).
    """
    m = counts.counts
    total = int(m.sum())
    if total == 0:
        raise ValueError("confusion counts are empty")
    if count_unknown_in_accuracy:
        accuracy = np.trace(m) / total
    else:
        kept = m[:2, :]
        if kept.sum() == 0:
            raise ValueError("no fg/bg pixels to score")
        accuracy = np.trace(m[:2, :2]) / kept.sum()

    ious, precisions, excluded = [], [], []
    for c in range(NUM_TRIMAP_CLASSES):
        tp = int(m[c, c])
        fn = int(m[c, :].sum()) - tp
        fp = int(m[:, c].sum()) - tp
        denom = tp + fp + fn
        if denom == 0:
            ious.append(None)
            excluded.append(CLASS_NAMES[c])
        else:
            ious.append(100.0 * tp / denom)
        predicted = tp + fp
        precisions.append(100.0 * tp / predicted if predicted else None)
    included = [v for v in ious if v is not None]
    if not included:
        raise ValueError("no class has any truth or predicted pixels")
    return MetricsReport(
        accuracy=float(100.0 * accuracy),
        miou=float(np.mean(included)),
        per_class_iou=tuple(ious),
        per_class_precision=tuple(precisions),
        n_pixels=total,
        excluded_classes=tuple(excluded),
    )


@dataclass
class AggregateStat:
    """Mean with spread over repeated runs.

    ``stderr`` is the sample standard deviation divided by sqrt(n); both it
    and ``std`` are 0 with ``single_run`` set when n == 1.
    """

    mean: float
    stderr: float
    std: float
    n: int

    @property
    def single_run(self) -> bool:
        return self.n == 1

    def format(self, decimals: int = 2, percent: bool = False) -> str:
        suffix = "%" if percent else ""
        return f"{self.mean:.{decimals}f} ± {self.stderr:.{decimals}f}{suffix}"


def aggregate(values) -> AggregateStat:
    """Mean ± standard error of a list of per-run metric values."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no values to aggregate")
    n = len(values)
    mean = float(np.mean(values))
    if n == 1:
        return AggregateStat(mean=mean, stderr=0.0, std=0.0, n=1)
    std = float(np.std(values, ddof=1))
    return AggregateStat(mean=mean, stderr=std / math.sqrt(n), std=std, n=n)
