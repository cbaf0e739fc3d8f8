"""
Inequality of per-class sample counts: Lorenz curve, Gini coefficient and
Hoover index.
"""

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from geoloc.errors import DegenerateInputError, DimensionError, InputError, LabelIndexError


@dataclass(frozen=True)
class ClassCounts:
    """Number of samples per class."""
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0:
            raise DimensionError("class counts must be a non-empty vector")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise InputError("class counts must be finite and non-negative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_classes: int) -> "ClassCounts":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise LabelIndexError(f"label outside [0, {num_classes})")
        return cls(np.bincount(labels, minlength=num_classes))

    @property
    def n(self) -> int:
        return self.counts.size

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def mean(self) -> float:
        return self.total / self.n

    def _require_mass(self) -> None:
        if self.total <= 0:
            raise DegenerateInputError("all class counts are zero")


def lorenz_curve(counts: ClassCounts) -> list[tuple[float, float]]:
    """Points (i/n, share of samples in the i smallest classes), from (0, 0) to (1, 1)."""
    counts._require_mass()
    ordered = np.sort(counts.counts)
    shares = np.cumsum(ordered) / counts.total
    points = [(0.0, 0.0)]
    points.extend(((i + 1) / counts.n, float(y)) for i, y in enumerate(shares))
    points[-1] = (1.0, 1.0)
    return points


def gini(counts: ClassCounts) -> float:
    counts._require_mass()
    ordered = np.sort(counts.counts)
    n = counts.n
    ranks = np.arange(1, n + 1)
    return float(2.0 * np.dot(ranks, ordered) / (n * ordered.sum()) - (n + 1) / n)


def hoover(counts: ClassCounts) -> float:
    counts._require_mass()
    return float(0.5 * np.abs(counts.counts - counts.mean).sum() / counts.total)


def lorenz_csv(points: Sequence[tuple[float, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["x", "y"])
    writer.writerows((repr(x), repr(y)) for x, y in points)
    return buffer.getvalue()
