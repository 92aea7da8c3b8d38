"""Pseudo-label self-training: train, label the unlabeled pool, retrain on the union."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ascpool.data import one_hot_matrix
from ascpool.ensemble import Predictor, Trainer


@dataclass(frozen=True)
class SslConfig:
    threshold: float = 0.5
    rounds: int = 3
    retrain_mode: str = "from_scratch"

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.retrain_mode != "from_scratch":
            raise ValueError(f"unsupported retrain_mode {self.retrain_mode!r}")


@dataclass
class RoundResult:
    model: Predictor
    X_augmented: np.ndarray
    Y_augmented: np.ndarray
    accepted: int
    accepted_mask: np.ndarray


@dataclass
class SslRun:
    model: Predictor
    accepted_counts: list[int] = field(default_factory=list)
    total_unlabeled: int = 0


def select_confident(probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Mask of rows whose top probability is strictly above ``threshold``, and their argmax."""
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64)
    return probs.max(axis=1) > threshold, np.argmax(probs, axis=1)


def _relabel_and_retrain(trainer, model, X_lab, Y_lab, X_unl, config, seed) -> RoundResult:
    if X_unl.shape[0]:
        mask, pseudo = select_confident(model.predict_proba(X_unl), config.threshold)
    else:
        mask, pseudo = np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64)
    X_aug = np.concatenate([X_lab, X_unl[mask]])
    Y_aug = np.concatenate([Y_lab, one_hot_matrix(pseudo[mask], Y_lab.shape[1])])
    retrained = trainer(X_aug, Y_aug, seed)
    return RoundResult(retrained, X_aug, Y_aug, int(mask.sum()), mask)


def _check_inputs(X_lab, Y_lab, X_unl):
    X_lab = np.asarray(X_lab, dtype=np.float64)
    Y_lab = np.asarray(Y_lab, dtype=np.float64)
    X_unl = np.asarray(X_unl, dtype=np.float64).reshape(-1, X_lab.shape[1])
    if X_lab.shape[0] == 0:
        raise ValueError("the labeled set must not be empty")
    if Y_lab.ndim != 2 or Y_lab.shape[0] != X_lab.shape[0]:
        raise ValueError("labeled targets must be an N x C array aligned with the features")
    return X_lab, Y_lab, X_unl


def pseudo_label_round(
    trainer: Trainer,
    X_labeled,
    Y_labeled,
    X_unlabeled,
    config: SslConfig,
    seed: int,
) -> RoundResult:
    """Train on the labeled set, pseudo-label confident unlabeled rows, retrain from scratch.

    Pseudo-labels are hard (one-hot). Every training call uses ``seed``.
    """
    X_lab, Y_lab, X_unl = _check_inputs(X_labeled, Y_labeled, X_unlabeled)
    model = trainer(X_lab, Y_lab, seed)
    return _relabel_and_retrain(trainer, model, X_lab, Y_lab, X_unl, config, seed)


def pseudo_label_run(
    trainer: Trainer,
    X_labeled,
    Y_labeled,
    X_unlabeled,
    config: SslConfig,
    seed: int,
) -> SslRun:
    """Repeat pseudo-labeling for ``config.rounds`` rounds.

    Each round relabels the whole unlabeled pool with the newest model and
    retrains on the original labeled set plus that round's accepted rows;
    pseudo-labels from earlier rounds are not carried over.
    """
    X_lab, Y_lab, X_unl = _check_inputs(X_labeled, Y_labeled, X_unlabeled)
    model = trainer(X_lab, Y_lab, seed)
    run = SslRun(model, [], X_unl.shape[0])
    for _ in range(config.rounds):
        result = _relabel_and_retrain(trainer, run.model, X_lab, Y_lab, X_unl, config, seed)
        run.model = result.model
        run.accepted_counts.append(result.accepted)
    return run


def write_round_log(path: str | Path, run: SslRun, threshold: float) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "accepted", "total_unlabeled", "threshold"])
        for r, accepted in enumerate(run.accepted_counts, start=1):
            writer.writerow([r, accepted, run.total_unlabeled, threshold])
