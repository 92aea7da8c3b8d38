"""Group-exclusive K-fold training and fusion of the resulting model ensemble."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ascpool.data import Dataset, one_hot_matrix
from ascpool.errors import AscError, FormatError, ShapeError

GROUP_KEYS = ("location_id", "recording_id")


class Predictor(Protocol):
    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


# (features, soft targets, seed) -> fitted predictor
Trainer = Callable[[np.ndarray, np.ndarray, int], Predictor]


class FoldError(AscError):
    def __init__(self, fold: int, cause: BaseException) -> None:
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold


@dataclass(frozen=True)
class FoldAssignment:
    K: int
    group_key: str
    fold_of_group: dict[str, int]

    def __post_init__(self) -> None:
        used = set(self.fold_of_group.values())
        if used != set(range(self.K)):
            raise ValueError(f"every fold in [0, {self.K}) needs at least one group, got {sorted(used)}")

    def segment_folds(self, dataset: Dataset) -> np.ndarray:
        return np.array(
            [self.fold_of_group[getattr(s, self.group_key)] for s in dataset.segments], dtype=np.int64
        )

    def groups_in(self, fold: int) -> list[str]:
        return sorted(g for g, f in self.fold_of_group.items() if f == fold)


@dataclass
class KFoldResult:
    models: list
    assignment: FoldAssignment
    oof_accuracy: float
    oof_proba: np.ndarray


def make_folds(dataset: Dataset, K: int, group_key: str, rng: np.random.Generator) -> FoldAssignment:
    """Shuffle the distinct groups and deal them round-robin to K folds."""
    if group_key not in GROUP_KEYS:
        raise ValueError(f"group_key must be one of {GROUP_KEYS}, got {group_key!r}")
    if K < 2:
        raise ValueError("K must be at least 2")
    groups = sorted({getattr(s, group_key) for s in dataset.segments})
    if len(groups) < K:
        raise ValueError(f"insufficient groups: {len(groups)} distinct {group_key} values for K={K}")
    order = rng.permutation(len(groups))
    mapping = {groups[g]: pos % K for pos, g in enumerate(order)}
    return FoldAssignment(K, group_key, mapping)


def train_kfold(
    dataset: Dataset,
    X: np.ndarray,
    K: int,
    trainer: Trainer,
    group_key: str,
    rng: np.random.Generator,
) -> KFoldResult:
    """Train one model per held-out fold and measure out-of-fold accuracy.

    ``X`` holds one feature row per dataset segment, in dataset order.
    Models are returned in fold order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != len(dataset):
        raise ShapeError(f"{X.shape[0]} feature rows for {len(dataset)} segments")
    labels = dataset.labels()
    C = dataset.class_count
    Y = one_hot_matrix(labels, C)
    assignment = make_folds(dataset, K, group_key, rng)
    folds = assignment.segment_folds(dataset)
    seeds = rng.integers(0, 2**31 - 1, size=K)
    models = []
    oof = np.zeros((len(dataset), C))
    for k in range(K):
        held = folds == k
        try:
            model = trainer(X[~held], Y[~held], int(seeds[k]))
            oof[held] = model.predict_proba(X[held])
        except (AscError, ValueError, ArithmeticError) as exc:
            raise FoldError(k, exc) from exc
        models.append(model)
    accuracy = float(np.mean(np.argmax(oof, axis=1) == labels)) if len(dataset) else 0.0
    return KFoldResult(models, assignment, accuracy, oof)


def fuse_majority(predictions, confidences=None) -> np.ndarray:
    """Per-sample majority vote over M models' label predictions (M x N).

    Ties go to the tied class with the largest confidence summed over models
    when ``confidences`` (M x N x C) is given, then to the lowest class index.
    """
    try:
        votes = np.asarray(predictions, dtype=np.int64)
    except ValueError as exc:
        raise ShapeError(f"ragged prediction lists: {exc}") from None
    if votes.ndim != 2 or votes.shape[0] < 1:
        raise ShapeError(f"predictions must be M x N with M >= 1, got shape {votes.shape}")
    if np.any(votes < 0):
        raise ValueError("class indices must be non-negative")
    M, N = votes.shape
    C = int(votes.max()) + 1 if votes.size else 1
    conf_sum = None
    if confidences is not None:
        conf = np.asarray(confidences, dtype=np.float64)
        if conf.ndim != 3 or conf.shape[:2] != (M, N) or conf.shape[2] < C:
            raise ShapeError(f"confidences must be {M} x {N} x C, got {conf.shape}")
        C = conf.shape[2]
        conf_sum = conf.sum(axis=0)
    counts = np.zeros((N, C), dtype=np.int64)
    for m in range(M):
        counts[np.arange(N), votes[m]] += 1
    out = np.empty(N, dtype=np.int64)
    for n in range(N):
        tied = np.flatnonzero(counts[n] == counts[n].max())
        if len(tied) > 1 and conf_sum is not None:
            best = conf_sum[n, tied].max()
            tied = tied[conf_sum[n, tied] == best]
        out[n] = tied[0]
    return out


def fuse_average(prob_sets) -> tuple[np.ndarray, np.ndarray]:
    """Mean of M models' N x C probability rows; label = argmax, ties to lowest index."""
    try:
        probs = np.asarray(prob_sets, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError(f"ragged probability sets: {exc}") from None
    if probs.ndim != 3 or probs.shape[0] < 1:
        raise ShapeError(f"probabilities must be M x N x C, got shape {probs.shape}")
    fused = probs.mean(axis=0)
    return np.argmax(fused, axis=1), fused


def ensemble_predict(models: Sequence[Predictor], X: np.ndarray, method: str = "average") -> tuple[np.ndarray, np.ndarray]:
    """Fuse an ensemble's predictions on ``X``; returns (labels, fused probabilities)."""
    prob_sets = np.stack([m.predict_proba(X) for m in models])
    labels, fused = fuse_average(prob_sets)
    if method == "majority":
        labels = fuse_majority(np.argmax(prob_sets, axis=2), prob_sets)
    elif method != "average":
        raise ValueError(f"unknown fusion method {method!r}")
    return labels, fused


def write_probabilities(path: str | Path, segment_ids: Sequence[str], vocabulary: Sequence[str], probs) -> None:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(segment_ids), len(vocabulary)):
        raise ShapeError(f"probability array {probs.shape} does not match ids/vocabulary")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment_id"] + [f"p_{c}" for c in vocabulary])
        for sid, row in zip(segment_ids, probs):
            writer.writerow([sid] + [repr(float(v)) for v in row])


def read_probabilities(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "segment_id" or not all(h.startswith("p_") for h in header[1:]):
            raise FormatError(f"{path}: expected header segment_id,p_<class>,...")
        vocabulary = [h[2:] for h in header[1:]]
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row for {row[0]!r} has {len(row)} fields, expected {len(header)}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, vocabulary, np.array(rows, dtype=np.float64).reshape(len(ids), len(vocabulary))
