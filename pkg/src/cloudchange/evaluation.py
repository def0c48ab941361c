"""Accuracy metrics for change detection against labeled ground truth.

Point-level confusion counts, the derived precision/recall/F1/IoU metrics
with explicit handling of undefined cases, and summary statistics for
cloud-to-cloud distance reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .geometry import ChangeLabel

__all__ = [
    "ChangeMetrics",
    "ConfusionCounts",
    "DistanceStats",
    "change_metrics",
    "confusion_counts",
    "distance_stats",
]


@dataclass(frozen=True)
class ConfusionCounts:
    """Point-level 2x2 tally of predicted versus true change labels.

    Attributes:
        tp / fp / fn / tn: standard confusion counts over evaluated points.
        unknown: points whose truth label is UNKNOWN, excluded from the
            tally and reported separately.
    """

    tp: int
    fp: int
    fn: int
    tn: int
    unknown: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn", "unknown"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def evaluated(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "unknown": self.unknown,
        }


@dataclass(frozen=True)
class ChangeMetrics:
    """Detection quality scores; None marks a metric whose denominator is
    zero (undefined, deliberately not reported as 0).

    Attributes:
        precision: tp / (tp + fp).
        recall: tp / (tp + fn).
        f1: harmonic mean of precision and recall.
        iou: tp / (tp + fp + fn).
    """

    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    iou: Optional[float]

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
        }


def _as_labels(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr.astype(np.int64)


def confusion_counts(predicted, truth) -> ConfusionCounts:
    """Tally predicted change labels against the ground truth.

    `predicted` must contain only CHANGED/UNCHANGED; `truth` may also
    contain UNKNOWN, which excludes the point from the tally (counted in
    the `unknown` field instead).
    """
    pred = _as_labels(predicted, "predicted")
    true = _as_labels(truth, "truth")
    if len(pred) != len(true):
        raise ValueError(
            f"label arrays differ in length: predicted {len(pred)}, truth {len(true)}"
        )
    valid_pred = {int(ChangeLabel.UNCHANGED), int(ChangeLabel.CHANGED)}
    if not set(np.unique(pred)) <= valid_pred:
        raise ValueError("predicted labels must be CHANGED or UNCHANGED")
    if not set(np.unique(true)) <= valid_pred | {int(ChangeLabel.UNKNOWN)}:
        raise ValueError("truth labels must be CHANGED, UNCHANGED, or UNKNOWN")
    known = true != int(ChangeLabel.UNKNOWN)
    p = pred[known] == int(ChangeLabel.CHANGED)
    t = true[known] == int(ChangeLabel.CHANGED)
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
        unknown=int(np.sum(~known)),
    )


def change_metrics(counts: ConfusionCounts) -> ChangeMetrics:
    """Precision, recall, F1, and IoU from confusion counts.

    Any metric whose denominator is zero comes back as None.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = None
    iou = tp / (tp + fp + fn) if tp + fp + fn > 0 else None
    return ChangeMetrics(precision=precision, recall=recall, f1=f1, iou=iou)


@dataclass(frozen=True)
class DistanceStats:
    """Summary of a distance distribution.

    Attributes:
        mean: arithmetic mean, metres.
        std: population standard deviation (ddof = 0), metres.
        percentiles: value at each requested percentile, metres.
    """

    mean: float
    std: float
    percentiles: Dict[int, float]

    def to_dict(self) -> dict:
        return {
            "mean_m": self.mean,
            "std_m": self.std,
            "percentiles_m": {str(k): v for k, v in sorted(self.percentiles.items())},
        }


def distance_stats(report, percentiles: Tuple[int, ...] = (50, 90, 95)) -> DistanceStats:
    """Mean, population std, and percentiles of a distance report.

    Accepts a DistanceReport or a plain array of distances; empty input is
    an error.
    """
    distances = np.asarray(getattr(report, "distances", report), dtype=np.float64)
    if distances.size == 0:
        raise ValueError("distance report is empty")
    values = np.percentile(distances, percentiles)
    return DistanceStats(
        mean=float(distances.mean()),
        std=float(distances.std()),
        percentiles={int(p): float(v) for p, v in zip(percentiles, values)},
    )
