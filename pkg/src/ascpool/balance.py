"""Acoustically balanced development/evaluation split selection.

Candidate splits keep every recording inside one set. Each candidate is
scored by fitting a diagonal-covariance GMM to the windowed feature
statistics pooled per set and measuring the empirical symmetric KL
divergence between the two fits; the final split is drawn at random from
the best-scoring quarter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from ascpool.data import FeatureMatrix
from ascpool.errors import ShapeError

VAR_FLOOR = 1e-6
DEV, EVAL = "development", "evaluation"


def aggregate_windows(m: FeatureMatrix, window: int = 50, hop: int = 25) -> np.ndarray:
    """Per-window mean and population std of each bin, one row per window.

    Windows start at 0, hop, 2*hop, ... and must fit entirely in the matrix.
    Rows are ``[means..., stds...]`` (length 2F).
    """
    if window < 1 or not 1 <= hop <= window:
        raise ValueError(f"need window >= 1 and 1 <= hop <= window, got window={window}, hop={hop}")
    if m.cols < window:
        raise ValueError(f"matrix has {m.cols} frames, fewer than the {window}-frame window")
    starts = range(0, m.cols - window + 1, hop)
    v = m.values
    out = np.empty((len(starts), 2 * m.rows))
    for i, t in enumerate(starts):
        chunk = v[:, t : t + window]
        out[i, : m.rows] = chunk.mean(axis=1)
        out[i, m.rows :] = chunk.std(axis=1)
    return out


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        K, D = self.means.shape
        if self.weights.shape != (K,) or self.variances.shape != (K, D):
            raise ShapeError("GMM weights/means/variances have inconsistent shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("GMM weights must sum to 1")
        if np.any(self.variances < VAR_FLOOR):
            raise ValueError(f"GMM variances must be >= {VAR_FLOOR}")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class GmmFit:
    model: GmmModel
    log_likelihood: float
    history: list[float]
    converged: bool


def _component_log_probs(weights, means, variances, X: np.ndarray) -> np.ndarray:
    # N x K matrix of log w_k + log N(x_n; mu_k, diag var_k)
    N, D = X.shape
    K = means.shape[0]
    maha = np.empty((N, K))
    for k in range(K):
        maha[:, k] = np.sum((X - means[k]) ** 2 / variances[k], axis=1)
    log_det = np.sum(np.log(variances), axis=1)
    return np.log(weights) - 0.5 * (D * math.log(2 * math.pi) + log_det + maha)


def gmm_log_densities(model: GmmModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ShapeError(f"points have dimension {X.shape[1]}, model expects {model.dim}")
    comp = _component_log_probs(model.weights, model.means, model.variances, X)
    return logsumexp(comp, axis=1)


def gmm_log_density(model: GmmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ShapeError(f"point has shape {x.shape}, model expects ({model.dim},)")
    return float(gmm_log_densities(model, x[None, :])[0])


def gmm_fit(
    points,
    n_components: int,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> GmmFit:
    """Fit a diagonal-covariance GMM by EM.

    Initial means are distinct randomly chosen points, initial variances the
    global variance, weights uniform. Stops after ``max_iters`` M-steps or
    once the relative log-likelihood gain falls below ``tol``. A component
    whose responsibility mass vanishes is re-seeded at the point with the
    lowest mixture density.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N, D = X.shape
    if n_components < 1:
        raise ValueError("need at least one component")
    if N < n_components:
        raise ValueError(f"{N} points are fewer than {n_components} components")
    rng = np.random.default_rng(seed)
    global_var = np.maximum(X.var(axis=0), VAR_FLOOR)
    weights = np.full(n_components, 1.0 / n_components)
    means = X[rng.choice(N, size=n_components, replace=False)].copy()
    variances = np.tile(global_var, (n_components, 1))

    history: list[float] = []
    converged = False
    for it in range(max_iters + 1):
        log_comp = _component_log_probs(weights, means, variances, X)
        log_px = logsumexp(log_comp, axis=1)
        ll = float(log_px.sum())
        history.append(ll)
        if it > 0 and ll - history[-2] < tol * abs(history[-2]):
            converged = True
            break
        if it == max_iters:
            break
        resp = np.exp(log_comp - log_px[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-10 * N
        nk_safe = np.where(empty, 1.0, nk)
        means = (resp.T @ X) / nk_safe[:, None]
        for k in range(n_components):
            diff = X - means[k]
            variances[k] = resp[:, k] @ (diff**2) / nk_safe[k]
        variances = np.maximum(variances, VAR_FLOOR)
        weights = nk / N
        if empty.any():
            worst = np.argsort(log_px)
            for j, k in enumerate(np.flatnonzero(empty)):
                means[k] = X[worst[j % N]]
                variances[k] = global_var
                weights[k] = 1.0 / N
            weights = weights / weights.sum()
    model = GmmModel(weights / weights.sum(), means, variances)
    return GmmFit(model, history[-1], history, converged)


def empirical_symmetric_kl(model_a: GmmModel, points_a, model_b: GmmModel, points_b) -> float:
    """Sample-based KL(A||B) on A's points plus KL(B||A) on B's points."""
    A = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise ValueError("both point sets must be non-empty")
    if model_a.dim != model_b.dim:
        raise ShapeError("models have different dimensions")
    d_ab = float(np.mean(gmm_log_densities(model_a, A) - gmm_log_densities(model_b, A)))
    d_ba = float(np.mean(gmm_log_densities(model_b, B) - gmm_log_densities(model_a, B)))
    return d_ab + d_ba


@dataclass(frozen=True)
class SplitCandidate:
    recording_set: dict[str, str]
    development: tuple[str, ...]
    evaluation: tuple[str, ...]
    score: float | None = None

    def set_of(self, segment_id: str) -> str | None:
        if segment_id in self.development:
            return DEV
        if segment_id in self.evaluation:
            return EVAL
        return None


ClassSegments = Mapping[str, Mapping[str, Sequence[str]]]


def _feasible(sizes: Sequence[int], dev_target: int, eval_target: int) -> bool:
    total = sum(sizes)
    sums = {0}
    for s in sizes:
        sums |= {x + s for x in sums}
    return any(dev_target <= x <= total - eval_target for x in sums)


def generate_candidates(
    class_segments: ClassSegments,
    dev_target: int,
    eval_target: int,
    n_candidates: int,
    rng: np.random.Generator,
    max_retries: int = 1000,
) -> list[SplitCandidate]:
    """Random whole-recording splits, filled per class to the exact segment targets.

    ``class_segments`` maps class -> recording id -> segment ids.
    """
    classes = sorted(class_segments)
    for c in classes:
        sizes = [len(v) for v in class_segments[c].values()]
        if not _feasible(sizes, dev_target, eval_target):
            raise ValueError(
                f"class {c!r}: cannot place {dev_target} development and {eval_target} "
                "evaluation segments without splitting a recording"
            )
    out = []
    for _ in range(n_candidates):
        assignment: dict[str, str] = {}
        dev: list[str] = []
        ev: list[str] = []
        for c in classes:
            recs = sorted(class_segments[c])
            for _attempt in range(max_retries):
                to_dev = rng.random(len(recs)) < 0.5
                dev_pool = [s for r, d in zip(recs, to_dev) if d for s in class_segments[c][r]]
                ev_pool = [s for r, d in zip(recs, to_dev) if not d for s in class_segments[c][r]]
                if len(dev_pool) >= dev_target and len(ev_pool) >= eval_target:
                    break
            else:
                raise RuntimeError(f"class {c!r}: no valid recording assignment after {max_retries} retries")
            assignment.update({r: DEV if d else EVAL for r, d in zip(recs, to_dev)})
            dev.extend(dev_pool[i] for i in sorted(rng.choice(len(dev_pool), dev_target, replace=False)))
            ev.extend(ev_pool[i] for i in sorted(rng.choice(len(ev_pool), eval_target, replace=False)))
        out.append(SplitCandidate(assignment, tuple(dev), tuple(ev)))
    return out


Scorer = Callable[[SplitCandidate, int], float]


def make_divergence_scorer(
    segment_points: Mapping[str, np.ndarray],
    n_components: int = 32,
    max_iters: int = 100,
    tol: float = 1e-6,
    base_seed: int = 0,
) -> Scorer:
    """Scorer pooling each set's aggregated points and comparing per-set GMM fits.

    Candidate ``i`` fits both GMMs with seed ``base_seed + i``.
    """

    def score(candidate: SplitCandidate, index: int) -> float:
        A = np.concatenate([segment_points[s] for s in candidate.development])
        B = np.concatenate([segment_points[s] for s in candidate.evaluation])
        seed = base_seed + index
        fit_a = gmm_fit(A, n_components, max_iters, tol, seed)
        fit_b = gmm_fit(B, n_components, max_iters, tol, seed)
        return empirical_symmetric_kl(fit_a.model, A, fit_b.model, B)

    return score


def score_candidates(candidates: Sequence[SplitCandidate], scorer: Scorer) -> list[SplitCandidate]:
    scored = []
    for i, cand in enumerate(candidates):
        try:
            value = float(scorer(cand, i))
        except Exception as exc:
            raise RuntimeError(f"scoring candidate {i} failed: {exc}") from exc
        scored.append(replace(cand, score=value))
    return scored


def pick_top_quartile(scored: Sequence[SplitCandidate], rng: np.random.Generator) -> SplitCandidate:
    if len(scored) < 4:
        raise ValueError("need at least 4 candidates")
    order = sorted(range(len(scored)), key=lambda i: scored[i].score)
    top = order[: math.ceil(0.25 * len(scored))]
    return scored[top[int(rng.integers(len(top)))]]


def select_balanced_split(
    candidates: Sequence[SplitCandidate], scorer: Scorer, rng: np.random.Generator
) -> SplitCandidate:
    """Score every candidate (lower is better) and draw one of the best quarter."""
    if len(candidates) < 4:
        raise ValueError("need at least 4 candidates")
    return pick_top_quartile(score_candidates(candidates, scorer), rng)


def write_split_manifest(path: str | Path, candidate: SplitCandidate) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["segment_id", "set"])
        for s in candidate.development:
            writer.writerow([s, DEV])
        for s in candidate.evaluation:
            writer.writerow([s, EVAL])


def write_score_report(path: str | Path, scored: Sequence[SplitCandidate], chosen: SplitCandidate) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["candidate", "score", "selected"])
        for i, cand in enumerate(scored):
            writer.writerow([i, repr(cand.score), int(cand is chosen)])
