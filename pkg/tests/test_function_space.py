import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metahunt.function_space import (
    EvalGrid, FuncSample, GridMismatchError, cross_gram, gram_matrix, inner_product,
    l2_dist, l2_norm, pairwise_distances, project_off_span, project_onto_span,
    symmetric_eigvals,
)
from metahunt.simulation import paper_basis

G3 = EvalGrid.uniform([-1.0, 0.0, 1.0])
X3 = np.array([-1.0, 0.0, 1.0])


def test_grid_validation():
    with pytest.raises(ValueError):
        EvalGrid([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        EvalGrid([0.0], [1.0])
    with pytest.raises(ValueError):
        EvalGrid([0.0, np.nan], [0.5, 0.5])
    with pytest.raises(ValueError):
        EvalGrid([0.0, 1.0], [1.5, -0.5])


def test_grid_equality_by_content():
    a = EvalGrid.uniform([0.0, 1.0, 2.0])
    b = EvalGrid.uniform(np.array([0.0, 1.0, 2.0]))
    assert a == b and hash(a) == hash(b)
    assert a != EvalGrid.uniform([0.0, 1.0, 3.0])


def test_funcsample_grid_mismatch():
    with pytest.raises(GridMismatchError):
        FuncSample([1.0, 2.0], G3)
    other = EvalGrid.uniform([0.0, 1.0, 2.0])
    with pytest.raises(GridMismatchError):
        FuncSample(X3, G3) - FuncSample(X3, other)
    with pytest.raises(GridMismatchError):
        inner_product(FuncSample(X3, other), X3, G3)


def test_inner_product_examples():
    rng = np.random.default_rng(0)
    assert inner_product(np.zeros(3), rng.normal(size=3), G3) == 0.0
    g = EvalGrid(rng.normal(size=7), rng.dirichlet(np.ones(7)))
    assert inner_product(np.ones(7), np.ones(7), g) == pytest.approx(1.0, abs=1e-15)
    # hand summation: (1 + 0 + 1) / 3
    assert inner_product(X3, X3, G3) == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_norm_examples():
    assert l2_norm(np.zeros(3), G3) == 0.0
    assert l2_norm(np.full(3, -2.5), G3) == pytest.approx(2.5, abs=1e-15)
    assert l2_norm(X3, G3) == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-15)


def test_distance_examples(normal_grid):
    f = np.sin(normal_grid.x)
    assert l2_dist(f, f, normal_grid) == 0.0
    assert l2_dist(f + 3.0, f, normal_grid) == pytest.approx(3.0, abs=1e-12)
    g = paper_basis(normal_grid.x)
    d = l2_dist(g[0], g[1], normal_grid)
    direct = np.sqrt(sum(w * (a - b) ** 2 for w, a, b in
                         zip(normal_grid.weights, g[0], g[1])))
    assert d > 0 and d == pytest.approx(direct, rel=1e-12)


def test_projection_examples():
    f = X3 ** 2
    assert np.array_equal(project_off_span(f, [], G3), f)
    r = project_off_span(X3, [X3], G3)
    assert l2_norm(r, G3) <= 1e-10 * l2_norm(X3, G3)
    # Gram-Schmidt oracle: orthonormalise {1, x}, subtract the components
    e1 = np.ones(3)
    e2 = X3 - inner_product(X3, e1, G3) * e1
    e2 = e2 / l2_norm(e2, G3)
    expect = f - inner_product(f, e1, G3) * e1 - inner_product(f, e2, G3) * e2
    got = project_off_span(f, [np.ones(3), X3], G3)
    np.testing.assert_allclose(got, expect, atol=1e-9)
    assert abs(inner_product(got, np.ones(3), G3)) < 1e-9
    assert abs(inner_product(got, X3, G3)) < 1e-9
    out = project_onto_span(FuncSample(f, G3), [np.ones(3), X3], G3)
    np.testing.assert_allclose(out.values, expect, atol=1e-9)


def test_gram_examples(normal_grid):
    np.testing.assert_allclose(gram_matrix(np.ones(3), G3), [[1.0]], atol=1e-15)
    D = gram_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), G3)
    assert D[0, 1] == 0.0 and D[1, 0] == 0.0
    B = paper_basis(normal_grid.x)
    Gm = gram_matrix(B, normal_grid)
    for i in range(4):
        for j in range(4):
            assert Gm[i, j] == pytest.approx(inner_product(B[i], B[j], normal_grid), rel=1e-12)
    np.testing.assert_allclose(cross_gram(B, B, normal_grid), Gm, rtol=1e-12)


def test_pairwise_distances_near_duplicates(normal_grid):
    f = np.cos(normal_grid.x) * 100.0
    D = pairwise_distances(np.vstack([f, f + 1e-9, f]), normal_grid)
    assert D[0, 2] == 0.0
    assert D[0, 1] == pytest.approx(1e-9, rel=1e-6)


def test_symmetric_eigvals_descending():
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(symmetric_eigvals(A), [3.0, 1.0], atol=1e-14)


# ---------------------------------------------------------------- properties

vec = arrays(np.float64, 12, elements=st.floats(-1e3, 1e3, allow_nan=False))
wts = arrays(np.float64, 12, elements=st.floats(0.01, 1.0))


@settings(max_examples=300, deadline=None)
@given(vec, vec, wts)
def test_cauchy_schwarz(f, g, w):
    grid = EvalGrid(np.arange(12.0), w / w.sum())
    lhs = abs(inner_product(f, g, grid))
    rhs = l2_norm(f, grid) * l2_norm(g, grid)
    assert lhs <= rhs * (1 + 1e-12) + 1e-9


@settings(max_examples=250, deadline=None)
@given(vec, arrays(np.float64, (3, 12), elements=st.floats(-10, 10)), wts)
def test_projection_idempotent_and_orthogonal(f, S, w):
    grid = EvalGrid(np.arange(12.0), w / w.sum())
    sv = np.linalg.svd(S * np.sqrt(grid.weights), compute_uv=False)
    if sv.min() < 1e-3 * max(sv.max(), 1.0):
        return
    r1 = project_off_span(f, S, grid)
    r2 = project_off_span(r1, S, grid)
    scale = max(l2_norm(f, grid), 1.0)
    assert l2_norm(r1 - r2, grid) <= 1e-10 * scale
    assert np.all(np.abs(cross_gram(r1, S, grid)) <= 1e-6 * scale * np.atleast_1d(l2_norm(S, grid)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (5, 12), elements=st.floats(-100, 100)), wts)
def test_gram_psd(F, w):
    grid = EvalGrid(np.arange(12.0), w / w.sum())
    G = gram_matrix(F, grid)
    assert np.array_equal(G, G.T)
    assert symmetric_eigvals(G).min() >= -1e-10 * max(1.0, np.trace(G))
