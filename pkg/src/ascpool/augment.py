"""Mixup and random erasing for spectrogram-like training samples.

All routines take an explicit ``numpy.random.Generator`` so independent
streams can be used in parallel without shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ascpool.data import FeatureMatrix
from ascpool.errors import ShapeError

MAX_RECT_ATTEMPTS = 100


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class EraseConfig:
    probability: float = 0.5
    area_low: float = 0.02
    area_high: float = 0.33
    aspect_low: float = 0.3
    aspect_high: float = 3.3
    fill_value: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("erase probability must lie in [0, 1]")
        if not 0.0 < self.area_low <= self.area_high <= 1.0:
            raise ValueError("erase area bounds must satisfy 0 < low <= high <= 1")
        if not 0.0 < self.aspect_low <= self.aspect_high:
            raise ValueError("erase aspect bounds must satisfy 0 < low <= high")


class MixedSample(NamedTuple):
    features: np.ndarray
    target: np.ndarray


class Rectangle(NamedTuple):
    top: int
    left: int
    height: int
    width: int


def sample_lambda(config: MixupConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(config.alpha, config.alpha))


def mixup(x_i, y_i, x_j, y_j, lam: float) -> MixedSample:
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"feature shapes differ: {x_i.shape} vs {x_j.shape}")
    if y_i.shape != y_j.shape:
        raise ShapeError(f"target shapes differ: {y_i.shape} vs {y_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    mu = 1.0 - lam
    return MixedSample(lam * x_i + mu * x_j, lam * y_i + mu * y_j)


def mixup_batch(
    batch: Sequence[tuple[np.ndarray, np.ndarray]],
    config: MixupConfig,
    rng: np.random.Generator,
) -> list[MixedSample]:
    """Mix every sample with a partner drawn by a random permutation of the batch.

    Self-pairing is allowed. One lambda is drawn per output sample.
    """
    if len(batch) < 2:
        raise ValueError("mixup needs a batch of at least two samples")
    perm = rng.permutation(len(batch))
    out = []
    for k, p in enumerate(perm):
        lam = sample_lambda(config, rng)
        x_i, y_i = batch[k]
        x_j, y_j = batch[p]
        out.append(mixup(x_i, y_i, x_j, y_j, lam))
    return out


def mixup_arrays(
    X: np.ndarray, Y: np.ndarray, config: MixupConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``mixup_batch`` over row-stacked features and targets.

    Draws from ``rng`` in the same order as ``mixup_batch``, so both give
    identical results for the same generator state.
    """
    n = X.shape[0]
    if n < 2:
        raise ValueError("mixup needs a batch of at least two samples")
    perm = rng.permutation(n)
    lam = np.array([sample_lambda(config, rng) for _ in range(n)])
    mu = 1.0 - lam
    return (
        lam[:, None] * X + mu[:, None] * X[perm],
        lam[:, None] * Y + mu[:, None] * Y[perm],
    )


def sample_rectangle(
    rows: int, cols: int, config: EraseConfig, rng: np.random.Generator
) -> Rectangle:
    total = rows * cols
    h = w = 0
    for _ in range(MAX_RECT_ATTEMPTS):
        area = rng.uniform(config.area_low, config.area_high) * total
        aspect = rng.uniform(config.aspect_low, config.aspect_high)
        # Flooring keeps h*w <= area, so the erased fraction never exceeds area_high.
        h = int(math.floor(math.sqrt(area * aspect) + 1e-9))
        w = int(math.floor(math.sqrt(area / aspect) + 1e-9))
        if 1 <= h <= rows and 1 <= w <= cols:
            break
    else:
        h = min(max(h, 1), rows)
        w = min(max(w, 1), cols)
    top = int(rng.integers(0, rows - h + 1))
    left = int(rng.integers(0, cols - w + 1))
    return Rectangle(top, left, h, w)


def random_erase_with_rect(
    m: FeatureMatrix, config: EraseConfig, rng: np.random.Generator
) -> tuple[FeatureMatrix, Rectangle | None]:
    """Like :func:`random_erase` but also report the erased rectangle (None if skipped)."""
    if rng.random() >= config.probability:
        return m, None
    rect = sample_rectangle(m.rows, m.cols, config, rng)
    values = m.values.copy()
    values[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = config.fill_value
    return FeatureMatrix(values), rect


def random_erase(m: FeatureMatrix, config: EraseConfig, rng: np.random.Generator) -> FeatureMatrix:
    return random_erase_with_rect(m, config, rng)[0]
