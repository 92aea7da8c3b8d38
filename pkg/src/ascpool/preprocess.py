"""Feature transforms: temporal averaging, background subtraction, standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ascpool.data import FeatureMatrix
from ascpool.errors import FormatError, ShapeError

STD_FLOOR = 1e-6


def temporal_average(m: FeatureMatrix) -> np.ndarray:
    """Collapse the time axis: one mean per frequency bin."""
    return m.values.mean(axis=1)


def background_subtract(m: FeatureMatrix) -> FeatureMatrix:
    """Remove each frequency bin's mean over the segment, so every row averages to zero."""
    v = m.values
    out = v - v.mean(axis=1, keepdims=True)
    # One refinement pass absorbs the rounding left by the first subtraction,
    # which keeps the transform idempotent to machine precision.
    out -= out.mean(axis=1, keepdims=True)
    return FeatureMatrix(out)


@dataclass(frozen=True)
class StandardizerStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("standardizer mean/std must be equal-length vectors")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"standard deviations must be >= {STD_FLOOR}")

    @property
    def bins(self) -> int:
        return self.mean.shape[0]


def fit_standardizer(train: Sequence[FeatureMatrix]) -> StandardizerStats:
    if len(train) == 0:
        raise ValueError("cannot fit a standardizer on an empty training list")
    rows = {m.rows for m in train}
    if len(rows) != 1:
        raise ShapeError(f"training matrices have differing bin counts: {sorted(rows)}")
    pooled = np.concatenate([m.values for m in train], axis=1)
    mean = pooled.mean(axis=1)
    std = np.maximum(pooled.std(axis=1), STD_FLOOR)
    return StandardizerStats(mean, std)


def apply_standardizer(stats: StandardizerStats, m: FeatureMatrix) -> FeatureMatrix:
    if m.rows != stats.bins:
        raise ShapeError(f"matrix has {m.rows} bins, standardizer expects {stats.bins}")
    return FeatureMatrix((m.values - stats.mean[:, None]) / stats.std[:, None])


def save_standardizer(stats: StandardizerStats, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "mean", "std"])
        for b, (mu, sd) in enumerate(zip(stats.mean, stats.std)):
            writer.writerow([b, repr(float(mu)), repr(float(sd))])


def load_standardizer(path: str | Path) -> StandardizerStats:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["bin", "mean", "std"]:
            raise FormatError(f"{path}: expected header bin,mean,std")
        rows = list(reader)
    if [int(r["bin"]) for r in rows] != list(range(len(rows))):
        raise FormatError(f"{path}: bins must be numbered 0..F-1 in order")
    return StandardizerStats(
        np.array([float(r["mean"]) for r in rows]),
        np.array([float(r["std"]) for r in rows]),
    )
