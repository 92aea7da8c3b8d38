"""Glue between feature matrices, augmentation and classifier training.

Also hosts the ablation runner: a grid of augmentation/CLR toggles, and a
grid of preprocessing variants plus their fusion.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ascpool.augment import EraseConfig, MixupConfig, mixup_arrays, random_erase
from ascpool.data import FeatureMatrix, one_hot_matrix
from ascpool.ensemble import fuse_average
from ascpool.model import Augmenter, ClassifierModel, TrainConfig, init_model, train
from ascpool.preprocess import (
    StandardizerStats,
    apply_standardizer,
    background_subtract,
    fit_standardizer,
    temporal_average,
)

VARIANTS = ("raw", "temporal", "background")

AUGMENTATION_ROWS = (
    # name, clr, random erasing, mixup
    ("baseline", False, False, False),
    ("baseline+clr", True, False, False),
    ("baseline+random_erasing", False, True, False),
    ("baseline+mixup", False, False, True),
    ("baseline+all_but_clr", False, True, True),
    ("baseline+all", True, True, True),
)
FEATURE_ROWS = ("baseline", "temporal_averaging", "background_subtraction", "fusion")


def derive_seed(root: int, name: str) -> int:
    """Independent 31-bit seed for a named stage, stable across runs and platforms."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def apply_variant(m: FeatureMatrix, variant: str) -> FeatureMatrix:
    if variant == "raw":
        return m
    if variant == "temporal":
        return FeatureMatrix(temporal_average(m)[:, None])
    if variant == "background":
        return background_subtract(m)
    raise ValueError(f"unknown preprocessing variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class PreparedFeatures:
    X: np.ndarray
    shape: tuple[int, int]
    stats: StandardizerStats | None


def prepare_features(
    matrices: Sequence[FeatureMatrix],
    variant: str = "raw",
    stats: StandardizerStats | None = None,
    standardize: bool = True,
) -> PreparedFeatures:
    """Transform, standardize and flatten matrices into one row per sample.

    Standardizer statistics are fit on ``matrices`` unless ``stats`` is given;
    pass the training statistics when preparing held-out data.
    """
    if not matrices:
        raise ValueError("no feature matrices given")
    transformed = [apply_variant(m, variant) for m in matrices]
    shapes = {m.shape for m in transformed}
    if len(shapes) != 1:
        raise ValueError(f"feature matrices have differing shapes: {sorted(shapes)}")
    if standardize:
        if stats is None:
            stats = fit_standardizer(transformed)
        transformed = [apply_standardizer(stats, m) for m in transformed]
    X = np.stack([m.values.reshape(-1) for m in transformed])
    return PreparedFeatures(X, transformed[0].shape, stats if standardize else None)


@dataclass(frozen=True)
class AugmentConfig:
    mixup: bool = False
    random_erasing: bool = False
    mixup_config: MixupConfig = field(default_factory=MixupConfig)
    erase_config: EraseConfig = field(default_factory=EraseConfig)
    order: tuple[str, ...] = ("random_erasing", "mixup")


def make_augmenter(shape: tuple[int, int], config: AugmentConfig) -> Augmenter | None:
    """Per-batch augmenter acting on flattened rows of matrices of ``shape``.

    Random erasing and mixup each draw from their own generator, seeded from
    their config, so switching one on or off leaves the other's draws intact.
    """
    steps = [s for s in config.order if getattr(config, s)]
    if not steps:
        return None
    erase_rng = np.random.default_rng(config.erase_config.seed)
    mix_rng = np.random.default_rng(config.mixup_config.seed)

    def augment(xb: np.ndarray, yb: np.ndarray):
        for step in steps:
            if step == "random_erasing":
                rows = [FeatureMatrix(row.reshape(shape)) for row in xb]
                xb = np.stack([random_erase(m, config.erase_config, erase_rng).values.reshape(-1) for m in rows])
            elif xb.shape[0] >= 2:
                xb, yb = mixup_arrays(xb, yb, config.mixup_config, mix_rng)
        return xb, yb

    return augment


def reseed_augment(config: AugmentConfig, seed: int) -> AugmentConfig:
    return replace(
        config,
        mixup_config=replace(config.mixup_config, seed=derive_seed(seed, "mixup")),
        erase_config=replace(config.erase_config, seed=derive_seed(seed, "erase")),
    )


def make_trainer(
    architecture: str,
    train_config: TrainConfig,
    hidden_units: int = 0,
    augment: AugmentConfig | None = None,
    shape: tuple[int, int] | None = None,
):
    """Trainer callable ``(X, Y, seed) -> ClassifierModel`` building a fresh model per call.

    Each call seeds initialisation, shuffling and the augmenter streams from
    ``seed`` alone, so equal inputs and seed always give the same model.
    """
    if augment is not None and shape is None:
        raise ValueError("augmentation needs the per-sample matrix shape")

    def trainer(X: np.ndarray, Y: np.ndarray, seed: int) -> ClassifierModel:
        model = init_model(architecture, X.shape[1], Y.shape[1], hidden_units, seed)
        cfg = replace(train_config, seed=seed)
        augmenter = make_augmenter(shape, reseed_augment(augment, seed)) if augment is not None else None
        return train(model, X, Y, cfg, np.random.default_rng(seed), augmenter).model

    return trainer


@dataclass(frozen=True)
class ExperimentSettings:
    architecture: str = "linear"
    hidden_units: int = 0
    train_config: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    variant: str = "raw"
    standardize: bool = True
    seed: int = 0


@dataclass(frozen=True)
class AblationRow:
    name: str
    accuracy: float
    delta: float
    clr: bool | None = None
    random_erasing: bool | None = None
    mixup: bool | None = None


def _fit_and_predict(
    settings: ExperimentSettings,
    train_mats: Sequence[FeatureMatrix],
    train_labels: np.ndarray,
    test_mats: Sequence[FeatureMatrix],
    class_count: int,
    variant: str,
    clr: bool,
    erasing: bool,
    mixing: bool,
) -> np.ndarray:
    tr = prepare_features(train_mats, variant, standardize=settings.standardize)
    te = prepare_features(test_mats, variant, stats=tr.stats, standardize=settings.standardize)
    aug = replace(settings.augment, mixup=mixing, random_erasing=erasing)
    trainer = make_trainer(
        settings.architecture,
        replace(settings.train_config, clr_enabled=clr),
        settings.hidden_units,
        aug,
        tr.shape,
    )
    model = trainer(tr.X, one_hot_matrix(train_labels, class_count), derive_seed(settings.seed, "train"))
    return model.predict_proba(te.X)


def run_ablation(
    settings: ExperimentSettings,
    train_mats: Sequence[FeatureMatrix],
    train_labels,
    test_mats: Sequence[FeatureMatrix],
    test_labels,
    class_count: int,
    mode: str = "augmentation",
) -> list[AblationRow]:
    """Train one model per ablation row with a shared seed and score it on the test set.

    ``augmentation`` toggles CLR, random erasing and mixup on the configured variant.
    ``features`` starts from the fully augmented CLR model and adds the
    temporal-averaging and background-subtraction variants plus the
    confidence-averaged fusion of all three. Deltas are in percentage points.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)

    def accuracy(probs: np.ndarray) -> float:
        return float(np.mean(np.argmax(probs, axis=1) == test_labels))

    rows: list[AblationRow] = []
    if mode == "augmentation":
        for name, clr, erasing, mixing in AUGMENTATION_ROWS:
            try:
                probs = _fit_and_predict(
                    settings, train_mats, train_labels, test_mats, class_count, settings.variant, clr, erasing, mixing
                )
            except Exception as exc:
                raise RuntimeError(f"ablation row {name!r} failed: {exc}") from exc
            rows.append(AblationRow(name, accuracy(probs), 0.0, clr, erasing, mixing))
    elif mode == "features":
        prob_sets = []
        for name, variant in zip(FEATURE_ROWS, VARIANTS):
            try:
                probs = _fit_and_predict(
                    settings, train_mats, train_labels, test_mats, class_count, variant, True, True, True
                )
            except Exception as exc:
                raise RuntimeError(f"ablation row {name!r} failed: {exc}") from exc
            prob_sets.append(probs)
            rows.append(AblationRow(name, accuracy(probs), 0.0))
        _, fused = fuse_average(prob_sets)
        rows.append(AblationRow("fusion", accuracy(fused), 0.0))
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    base = rows[0].accuracy
    return [replace(r, delta=100.0 * (r.accuracy - base)) for r in rows]


def write_ablation_csv(path: str | Path, rows: Sequence[AblationRow], mode: str) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "augmentation":
            writer.writerow(["combination", "clr", "random_erasing", "mixup", "accuracy", "delta"])
            for r in rows:
                flags = ["yes" if f else "no" for f in (r.clr, r.random_erasing, r.mixup)]
                writer.writerow([r.name, *flags, f"{100 * r.accuracy:.2f}", f"{r.delta:.2f}"])
        else:
            writer.writerow(["method", "accuracy", "delta"])
            for r in rows:
                writer.writerow([r.name, f"{100 * r.accuracy:.2f}", f"{r.delta:.2f}"])
