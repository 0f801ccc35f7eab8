import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metahunt.conformal import (
    Functional, PredictionInterval, calibration_scores, conformal_quantile, cross_conformal,
    _split_indices, evaluate_coverage, kernel_weights, median_pairwise_distance, quantile_index,
    split_conformal, split_conformal_arrays, weighted_conformal, weighted_quantile,
)
from metahunt.function_space import EvalGrid, l2_norm
from metahunt.pipeline import PipelineConfig, StudyRecord, fit_pipeline
from metahunt.simulation import paper_basis

from conftest import noiseless_hull

NO_DENOISE = PipelineConfig(k=4, denoise=False)


def test_quantile_examples():
    assert conformal_quantile(np.arange(1.0, 20.0), 0.05) == 19.0
    assert quantile_index(19, 0.05) == 19
    assert conformal_quantile([5.0], 0.5) == 5.0
    assert conformal_quantile([1.0, 2.0, 3.0], 0.05) == math.inf
    with pytest.raises(ValueError):
        conformal_quantile([], 0.1)
    with pytest.raises(ValueError):
        conformal_quantile([1.0], 1.0)


def test_quantile_columnwise():
    R = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    np.testing.assert_array_equal(conformal_quantile(R, 0.5), [2.0, 20.0])


def test_weighted_quantile_examples():
    # masses {3/7, 1/7} plus the target's 3/7: mass through 10 is 4/7 < 0.95
    assert weighted_quantile([1.0, 10.0], [3.0, 1.0], 0.05) == math.inf
    assert weighted_quantile([1.0, 10.0], [3.0, 1.0], 0.5) == 10.0
    assert weighted_quantile([1.0, 10.0], [3.0, 1.0], 0.6) == 1.0
    # point mass on one study: masses 1/2 each for it and the target
    r = np.array([4.0, 2.0, 9.0])
    w = np.array([1.0, 1e-300, 0.0])
    assert weighted_quantile(r, w, 0.6) == 4.0
    with pytest.raises(ValueError):
        weighted_quantile([1.0, 2.0], [0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        weighted_quantile([1.0, 2.0], [1.0], 0.1)


def test_interval_type():
    iv = PredictionInterval(np.array([1.0, 2.0]), np.array([0.5, math.inf]), 0.1, "split",
                            np.array([0.0, 1.0]))
    np.testing.assert_array_equal(iv.lo, [0.5, -math.inf])
    assert list(iv.contains([1.4, 1e300])) == [True, True]
    assert iv.rows()[0] == {"x": 0.0, "center": 1.0, "lo": 0.5, "hi": 1.5,
                            "method": "split", "alpha": 0.1}
    with pytest.raises(ValueError):
        PredictionInterval(np.array([1.0]), np.array([-1.0]), 0.1, "split")


def test_functionals(normal_grid):
    f = np.sin(normal_grid.x)
    assert Functional.mean(normal_grid)(f)[0, 0] == pytest.approx(f @ normal_grid.weights)
    fn = Functional.point_eval(normal_grid, [0.0, 3.0])
    idx = np.abs(normal_grid.x - 3.0).argmin()
    assert fn(f)[0, 1] == f[idx]
    tab = Functional.weighted(normal_grid, normal_grid.weights)
    assert tab(f)[0, 0] == pytest.approx(f @ normal_grid.weights)


def _studies(grid, m=40, seed=0):
    F, P, G = noiseless_hull(grid, m=m, seed=seed)
    W = np.random.default_rng(seed + 1).normal(size=(m, 2))
    return W, F


def test_identical_studies_collapse(normal_grid):
    f = paper_basis(normal_grid.x)[2]
    W = np.random.default_rng(0).normal(size=(20, 2))
    F = np.tile(f, (20, 1))
    cfg = PipelineConfig(k=1, denoise=False)
    iv = split_conformal((W, F), np.zeros(2), Functional.pointwise(normal_grid), 0.2,
                         pipeline_config=cfg, grid=normal_grid)
    assert np.all(iv.half_width <= 1e-9)
    np.testing.assert_allclose(iv.center, f, atol=1e-9)
    iv = cross_conformal((W, F), np.zeros(2), Functional.mean(normal_grid), 0.1, folds=4,
                         pipeline_config=cfg, grid=normal_grid)
    assert iv.half_width[0] <= 1e-9


def test_split_matches_algorithm(normal_grid):
    W, F = _studies(normal_grid)
    fn = Functional.point_eval(normal_grid, [-2.0, 0.0, 4.0])
    iv = split_conformal((W, F), W[0], fn, 0.2, 0.7, seed=3, pipeline_config=NO_DENOISE,
                         grid=normal_grid)
    # by hand: same split, fit, residuals, order statistic
    perm = np.random.default_rng(3).permutation(40)
    train, cal = np.sort(perm[:28]), np.sort(perm[28:])
    pipe = fit_pipeline(W[train], F[train], normal_grid, NO_DENOISE)
    pred = pipe.predict_values(W[cal])
    r = np.abs(F[cal][:, fn.indices] - pred[:, fn.indices])
    k = math.ceil(0.8 * 13)
    np.testing.assert_array_equal(iv.half_width, np.sort(r, axis=0)[k - 1])
    np.testing.assert_array_equal(iv.center, pipe.predict_values(W[:1])[0, fn.indices])


def test_study_records_accepted(normal_grid):
    from metahunt.function_space import FuncSample
    W, F = _studies(normal_grid, m=20)
    recs = [StudyRecord(w, FuncSample(f, normal_grid), id=str(i)) for i, (w, f) in
            enumerate(zip(W, F))]
    a = split_conformal(recs, W[0], Functional.mean(normal_grid), 0.2,
                        pipeline_config=NO_DENOISE)
    b = split_conformal((W, F), W[0], Functional.mean(normal_grid), 0.2,
                        pipeline_config=NO_DENOISE)
    assert a.center[0] == b.center[0] and a.half_width[0] == b.half_width[0]


def test_too_few_calibration(normal_grid):
    W, F = _studies(normal_grid, m=5)
    with pytest.raises(ValueError, match="calibration"):
        split_conformal((W, F), W[0], Functional.mean(normal_grid), 0.2, 0.9,
                        pipeline_config=PipelineConfig(k=2, denoise=False), grid=normal_grid)


def test_cross_two_folds_by_hand(normal_grid):
    W, F = _studies(normal_grid, m=30)
    fn = Functional.mean(normal_grid)
    fold_ids = np.repeat([0, 1], 15)
    iv = cross_conformal((W, F), W[3], fn, 0.2, folds=2, pipeline_config=NO_DENOISE,
                         grid=normal_grid, fold_ids=fold_ids)
    A, B = np.arange(15), np.arange(15, 30)
    pa = fit_pipeline(W[A], F[A], normal_grid, NO_DENOISE)
    pb = fit_pipeline(W[B], F[B], normal_grid, NO_DENOISE)
    pool = np.vstack([calibration_scores(pb, W[A], F[A], fn),
                      calibration_scores(pa, W[B], F[B], fn)])
    assert iv.half_width[0] == conformal_quantile(pool, 0.2)[0]
    center = 0.5 * (fn(pa.predict_values(W[3:4]))[0, 0] + fn(pb.predict_values(W[3:4]))[0, 0])
    assert iv.center[0] == pytest.approx(center, abs=1e-12)


def test_weighted_huge_bandwidth_matches_split(normal_grid):
    W, F = _studies(normal_grid)
    fn = Functional.point_eval(normal_grid, np.linspace(-8, 8, 9))
    for alpha in (0.1, 0.3):
        s = split_conformal((W, F), W[5], fn, alpha, seed=1, pipeline_config=NO_DENOISE,
                            grid=normal_grid)
        w = weighted_conformal((W, F), W[5], fn, alpha, bandwidth_multiplier=1e6, seed=1,
                               pipeline_config=NO_DENOISE, grid=normal_grid)
        np.testing.assert_array_equal(s.center, w.center)
        # same calibration scores, so compare ranks: within one order statistic
        pipe_scores = _scores(W, F, fn, 1)
        for j in range(fn.indices.size):
            col = np.sort(pipe_scores[:, j])
            rs = np.searchsorted(col, s.half_width[j])
            rw = np.searchsorted(col, w.half_width[j])
            assert abs(rs - rw) <= 1


def _scores(W, F, fn, seed):
    perm = np.random.default_rng(seed).permutation(F.shape[0])
    n = int(round(0.7 * F.shape[0]))
    train, cal = np.sort(perm[:n]), np.sort(perm[n:])
    pipe = fit_pipeline(W[train], F[train], fn.grid, NO_DENOISE)
    return calibration_scores(pipe, W[cal], F[cal], fn)


def test_weighted_point_mass(normal_grid):
    W, F = _studies(normal_grid)
    perm = np.random.default_rng(2).permutation(40)
    cal = np.sort(perm[28:])
    fn = Functional.mean(normal_grid)
    j = cal[0]
    scores = _scores(W, F, fn, 2)
    tiny = 1e-9 / max(median_pairwise_distance(W), 1e-300)
    w = weighted_conformal((W, F), W[j], fn, 0.05, bandwidth_multiplier=tiny, seed=2,
                           pipeline_config=NO_DENOISE, grid=normal_grid)
    assert w.half_width[0] == math.inf
    w = weighted_conformal((W, F), W[j], fn, 0.6, bandwidth_multiplier=tiny, seed=2,
                           pipeline_config=NO_DENOISE, grid=normal_grid)
    assert w.half_width[0] == scores[0, 0]


def test_weighted_fallback_identical_covariates(normal_grid):
    _, F = _studies(normal_grid, m=20)
    W = np.zeros((20, 2))
    w = weighted_conformal((W, F), np.zeros(2), Functional.mean(normal_grid), 0.2,
                           pipeline_config=PipelineConfig(k=2, denoise=False,
                                                          weight_model="logratio",
                                                          ridge_lambda=1.0),
                           grid=normal_grid)
    assert w.flags["unweighted_fallback"]


def test_kernel_weights():
    w = kernel_weights(np.array([[0.0], [1.0]]), np.array([0.0]), 1.0)
    np.testing.assert_allclose(w, [1.0, math.exp(-0.5)])
    assert median_pairwise_distance(np.array([[0.0], [1.0], [3.0]])) == 2.0


def test_evaluate_coverage_examples():
    truth = np.array([1.0, 2.0, 3.0])
    assert evaluate_coverage(truth, -np.inf, np.inf)["coverage"] == 1.0
    assert evaluate_coverage(truth, truth + 1, truth + 1)["coverage"] == 0.0
    rep = evaluate_coverage(truth, truth - 1, truth + 1, x=[0.0, 1.0, 2.0], bins=[0, 1.5, 3])
    assert [b["n"] for b in rep["bins"]] == [2, 1]
    assert rep["mean_length"] == 2.0


def test_finite_sample_guarantee_exchangeable():
    # oracle-style check: exchangeable scores, new score covered at rate >= 1 - alpha
    rng = np.random.default_rng(0)
    alpha, hits, trials = 0.1, 0, 2000
    for _ in range(trials):
        r = np.abs(rng.standard_t(3, size=15))
        hits += np.abs(rng.standard_t(3)) <= conformal_quantile(r, alpha)
    assert hits / trials >= 1 - alpha - 0.02


# ---------------------------------------------------------------- properties

res = arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1e6))


@settings(max_examples=300, deadline=None)
@given(res, st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_quantile_monotone_in_alpha(r, a1, a2):
    lo, hi = sorted((a1, a2))
    assert conformal_quantile(r, lo) >= conformal_quantile(r, hi)


@settings(max_examples=300, deadline=None)
@given(res, st.floats(0.001, 0.999))
def test_weighted_uniform_agrees(r, alpha):
    n = r.shape[0]
    t = (1 - alpha) * (n + 1)
    assume(abs(t - round(t)) > 1e-6)
    assert weighted_quantile(r, np.ones(n), alpha) == conformal_quantile(r, alpha)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 20, elements=st.floats(0.01, 1)))
def test_ate_lipschitz(f, g, w):
    grid = EvalGrid(np.arange(20.0), w / w.sum())
    fn = Functional.mean(grid)
    d = abs(fn(f)[0, 0] - fn(g)[0, 0])
    assert d <= l2_norm(f - g, grid) * (1 + 1e-12) + 1e-9


TGRID = EvalGrid.uniform(np.linspace(-10, 10, 40))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50))
def test_translation_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    G = paper_basis(TGRID.x)
    # the vertices sit in the training part of the split, so fSPA finds them exactly
    train, _ = _split_indices(30, 0.7, seed)
    P = rng.dirichlet(np.ones(4), size=30)
    P[train[:4]] = np.eye(4)
    F = P @ G
    W = rng.normal(size=(30, 2))
    fn = Functional.point_eval(TGRID, [-5.0, 0.0, 5.0])
    a = split_conformal_arrays(W, F, TGRID, W[:3], fn, 0.2, seed=seed, pipeline_config=NO_DENOISE)
    b = split_conformal_arrays(W, F + c, TGRID, W[:3], fn, 0.2, seed=seed,
                               pipeline_config=NO_DENOISE)
    scale = 1e-6 * (1 + abs(c) + np.abs(F).max())
    np.testing.assert_allclose(b[0], a[0] + c, atol=scale)
    np.testing.assert_allclose(b[1], a[1], atol=scale)
