import math

import numpy as np
import pytest

from ascpool.balance import (
    DEV,
    EVAL,
    GmmModel,
    SplitCandidate,
    aggregate_windows,
    empirical_symmetric_kl,
    generate_candidates,
    gmm_fit,
    gmm_log_densities,
    gmm_log_density,
    pick_top_quartile,
    select_balanced_split,
)
from ascpool.data import FeatureMatrix
from ascpool.errors import ShapeError


def std_normal_1d():
    return GmmModel(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))


# ---- windowing ---------------------------------------------------------------


def test_window_equal_to_length_gives_one_point():
    m = FeatureMatrix(np.random.default_rng(0).normal(size=(3, 10)))
    pts = aggregate_windows(m, window=10, hop=5)
    assert pts.shape == (1, 6)
    assert np.allclose(pts[0, :3], m.values.mean(axis=1))
    assert np.allclose(pts[0, 3:], m.values.std(axis=1))


def test_constant_matrix_windows():
    pts = aggregate_windows(FeatureMatrix(np.full((4, 30), 2.0)), window=10, hop=5)
    assert np.all(pts[:, :4] == 2.0) and np.all(pts[:, 4:] == 0.0)


def test_default_window_count_on_full_segment():
    # starts 0, 25, ..., while start + 50 <= 501
    expected = len([t for t in range(501) if t % 25 == 0 and t + 50 <= 501])
    assert expected == 19
    pts = aggregate_windows(FeatureMatrix(np.zeros((40, 501))), window=50, hop=25)
    assert pts.shape == (19, 80)


def test_window_errors():
    m = FeatureMatrix(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        aggregate_windows(m, window=6, hop=3)
    with pytest.raises(ValueError):
        aggregate_windows(m, window=4, hop=5)


# ---- densities -----------------------------------------------------------------


def test_log_density_standard_normal():
    model = std_normal_1d()
    assert gmm_log_density(model, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert gmm_log_density(model, [1.0]) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-12)
    assert gmm_log_density(model, [0.0]) == pytest.approx(-0.91894, abs=1e-5)


def test_log_density_dimension_mismatch():
    with pytest.raises(ShapeError):
        gmm_log_density(std_normal_1d(), [0.0, 1.0])


def test_density_integrates_to_one():
    model = GmmModel(
        np.array([0.3, 0.7]),
        np.array([[-1.0, 0.5], [1.5, -0.5]]),
        np.array([[0.5, 1.0], [0.8, 0.3]]),
    )
    rng = np.random.default_rng(0)
    lo, hi = -8.0, 8.0
    pts = rng.uniform(lo, hi, size=(400_000, 2))
    integral = np.mean(np.exp(gmm_log_densities(model, pts))) * (hi - lo) ** 2
    assert abs(integral - 1.0) < 0.05


# ---- EM ---------------------------------------------------------------------------


def test_single_component_closed_form():
    X = np.random.default_rng(3).normal([1.0, -2.0, 5.0], [0.5, 2.0, 1.0], size=(500, 3))
    fit = gmm_fit(X, 1, seed=0)
    assert np.allclose(fit.model.means[0], X.mean(axis=0), rtol=0, atol=1e-9)
    assert np.allclose(fit.model.variances[0], X.var(axis=0), rtol=0, atol=1e-9)
    assert fit.model.weights.tolist() == [1.0]


def test_single_component_variance_floor():
    fit = gmm_fit(np.full((10, 2), 4.0), 1)
    assert np.all(fit.model.variances == 1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_em_log_likelihood_monotone(seed):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(c, 1.0, size=(60, 2)) for c in rng.normal(0, 4, size=(3, 2))])
    fit = gmm_fit(X, 4, max_iters=100, tol=0.0, seed=seed)
    hist = np.array(fit.history)
    assert np.all(np.diff(hist) >= -1e-9)


def test_two_cluster_recovery():
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(0, 1, 300), rng.normal(100, 1, 700)])[:, None]
    # oracle: nearest-center assignment, then per-cluster sample statistics
    near_zero = np.abs(X[:, 0] - 0) < np.abs(X[:, 0] - 100)
    oracle_means = sorted([X[near_zero, 0].mean(), X[~near_zero, 0].mean()])
    oracle_weights = sorted([near_zero.mean(), 1 - near_zero.mean()])
    fit = gmm_fit(X, 2, seed=0)
    order = np.argsort(fit.model.means[:, 0])
    means = fit.model.means[order, 0]
    weights = fit.model.weights[order]
    assert np.all(np.abs(means - [0, 100]) < 0.5)
    assert np.allclose(means, oracle_means, atol=1e-3)
    assert np.all(np.abs(weights - [0.3, 0.7]) < 0.05)
    assert np.allclose(weights, oracle_weights, atol=1e-3)


def test_gmm_fit_needs_enough_points():
    with pytest.raises(ValueError):
        gmm_fit(np.zeros((3, 2)), 4)


def test_gmm_model_validation():
    with pytest.raises(ValueError):
        GmmModel(np.array([0.5, 0.4]), np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        GmmModel(np.array([1.0]), np.zeros((1, 1)), np.full((1, 1), 1e-9))


# ---- divergence ------------------------------------------------------------------


def test_self_divergence_is_zero():
    X = np.random.default_rng(0).normal(size=(200, 2))
    fit = gmm_fit(X, 2)
    assert empirical_symmetric_kl(fit.model, X, fit.model, X) == 0.0


def test_divergence_symmetry_is_exact():
    rng = np.random.default_rng(1)
    A, B = rng.normal(0, 1, (300, 2)), rng.normal(0.5, 1.5, (200, 2))
    fa, fb = gmm_fit(A, 2), gmm_fit(B, 3)
    assert empirical_symmetric_kl(fa.model, A, fb.model, B) == empirical_symmetric_kl(fb.model, B, fa.model, A)


def test_divergence_matches_gaussian_closed_form():
    rng = np.random.default_rng(2)
    A = rng.normal(0.0, 1.0, 50_000)[:, None]
    B = rng.normal(1.0, 1.0, 50_000)[:, None]
    fa, fb = gmm_fit(A, 1), gmm_fit(B, 1)
    # KL(N(0,1)||N(1,1)) = 0.5 in each direction
    analytic = 2 * 0.5 * (1.0 - 0.0) ** 2
    assert abs(empirical_symmetric_kl(fa.model, A, fb.model, B) - analytic) < 0.2


def test_divergence_empty_points():
    with pytest.raises(ValueError):
        empirical_symmetric_kl(std_normal_1d(), np.zeros((0, 1)), std_normal_1d(), np.zeros((3, 1)))


# ---- candidates --------------------------------------------------------------------


def _corpus(n_classes=2, n_recs=5, per_rec=4):
    return {
        f"c{c}": {f"c{c}r{r}": [f"c{c}r{r}s{s}" for s in range(per_rec)] for r in range(n_recs)}
        for c in range(n_classes)
    }


def test_single_recording_is_infeasible():
    corpus = {"bus": {"r0": [f"s{i}" for i in range(10)]}}
    with pytest.raises(ValueError, match="bus"):
        generate_candidates(corpus, 3, 2, 5, np.random.default_rng(0))


def test_candidates_respect_constraints():
    corpus = _corpus()
    cands = generate_candidates(corpus, 6, 4, 100, np.random.default_rng(0))
    assert len(cands) == 100
    rec_of = {s: r for c in corpus.values() for r, segs in c.items() for s in segs}
    cls_of = {s: c for c, recs in corpus.items() for segs in recs.values() for s in segs}
    for cand in cands:
        assert not set(cand.development) & set(cand.evaluation)
        for s in cand.development:
            assert cand.recording_set[rec_of[s]] == DEV
        for s in cand.evaluation:
            assert cand.recording_set[rec_of[s]] == EVAL
        for c in corpus:
            assert sum(cls_of[s] == c for s in cand.development) == 6
            assert sum(cls_of[s] == c for s in cand.evaluation) == 4


def test_candidates_exhaustive_small_fixture():
    # 3 recordings of 2 segments, targets 2/2: the only valid splits put one or
    # two recordings in development and the rest in evaluation
    corpus = {"x": {"a": ["a0", "a1"], "b": ["b0", "b1"], "c": ["c0", "c1"]}}
    cands = generate_candidates(corpus, 2, 2, 200, np.random.default_rng(1))
    for cand in cands:
        for rec in "abc":
            sets = {cand.set_of(f"{rec}{i}") for i in range(2)} - {None}
            assert len(sets) <= 1
            if sets:
                assert sets == {cand.recording_set[rec]}


def _scored(scores):
    return [SplitCandidate({}, (), (), s) for s in scores]


def test_top_quartile_of_four_is_the_best():
    scored = _scored([3.0, 1.0, 4.0, 2.0])
    for seed in range(10):
        assert pick_top_quartile(scored, np.random.default_rng(seed)).score == 1.0


def test_all_equal_scores_return_a_candidate():
    scored = _scored([2.0] * 8)
    assert pick_top_quartile(scored, np.random.default_rng(0)) in scored


def test_selected_never_above_first_quartile():
    rng = np.random.default_rng(5)
    for n in range(4, 40):
        scores = rng.normal(size=n)
        chosen = pick_top_quartile(_scored(scores), rng)
        assert chosen.score <= np.percentile(scores, 25)


def test_select_balanced_split_uses_scorer():
    cands = generate_candidates(_corpus(), 6, 4, 8, np.random.default_rng(0))
    chosen = select_balanced_split(cands, lambda c, i: float(i), np.random.default_rng(0))
    assert chosen.score in (0.0, 1.0)


def test_scorer_failure_names_candidate():
    cands = _scored([1.0, 2.0, 3.0, 4.0])

    def scorer(c, i):
        if i == 2:
            raise ValueError("bad")
        return 0.0

    with pytest.raises(RuntimeError, match="candidate 2"):
        select_balanced_split(cands, scorer, np.random.default_rng(0))


def test_need_four_candidates():
    with pytest.raises(ValueError):
        select_balanced_split(_scored([1.0, 2.0, 3.0]), lambda c, i: 0.0, np.random.default_rng(0))
