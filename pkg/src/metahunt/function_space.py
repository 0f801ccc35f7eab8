"""Grid-sampled functions and the empirical L2(mu) geometry.

A function is stored as its values on an :class:`EvalGrid`.  Collections of
functions are handled as 2-D arrays with one row per function; the helpers
below accept either a :class:`FuncSample`, a sequence of them, or raw arrays
whose trailing dimension matches the grid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Raised when a function is not aligned to the grid it is used with."""


@dataclass(frozen=True, eq=False)
class EvalGrid:
    """Covariate points with nonnegative weights summing to one."""

    points: np.ndarray
    weights: np.ndarray
    key: str = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if pts.shape[0] < 2:
            raise ValueError("an EvalGrid needs at least 2 points")
        if w.shape[0] != pts.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("grid weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"grid weights sum to {w.sum()!r}, expected 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        digest = hashlib.sha256(pts.tobytes() + w.tobytes()).hexdigest()[:16]
        object.__setattr__(self, "key", digest)

    @classmethod
    def uniform(cls, points) -> "EvalGrid":
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        """Grid points as a flat array (1-D covariates only)."""
        if self.points.shape[1] != 1:
            raise ValueError("grid covariates are multivariate")
        return self.points[:, 0]

    def __eq__(self, other):
        return isinstance(other, EvalGrid) and other.key == self.key

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True, eq=False)
class FuncSample:
    values: np.ndarray
    grid: EvalGrid

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.shape[0] != self.grid.size:
            raise GridMismatchError(
                f"function has {v.shape[0]} values, grid has {self.grid.size} points")
        if not np.all(np.isfinite(v)):
            raise ValueError("function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __sub__(self, other: "FuncSample") -> "FuncSample":
        _check_same_grid(self.grid, other.grid)
        return FuncSample(self.values - other.values, self.grid)

    def __add__(self, other: "FuncSample") -> "FuncSample":
        _check_same_grid(self.grid, other.grid)
        return FuncSample(self.values + other.values, self.grid)


def _check_same_grid(a: EvalGrid, b: EvalGrid):
    if a is not b and a.key != b.key:
        raise GridMismatchError("functions live on different grids")


def as_values(f, grid: EvalGrid) -> np.ndarray:
    """Return grid values for ``f`` (FuncSample, sequence of them, or array).

    The result is 1-D for a single function and 2-D (one row per function)
    for collections.
    """
    if isinstance(f, FuncSample):
        _check_same_grid(f.grid, grid)
        return f.values
    if isinstance(f, (list, tuple)) and f and isinstance(f[0], FuncSample):
        for s in f:
            _check_same_grid(s.grid, grid)
        return np.vstack([s.values for s in f])
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == 0:
        return arr.reshape(0, grid.size)
    if arr.shape[-1] != grid.size:
        raise GridMismatchError(
            f"function has {arr.shape[-1]} values, grid has {grid.size} points")
    return arr


def inner_product(f, g, grid: EvalGrid):
    """Weighted inner product sum_j w_j f(x_j) g(x_j).

    Broadcasts over leading dimensions, so rows of 2-D inputs give a vector.
    """
    fv = as_values(f, grid)
    gv = as_values(g, grid)
    out = (fv * gv) @ grid.weights
    return float(out) if np.ndim(out) == 0 else out


def l2_norm(f, grid: EvalGrid):
    fv = as_values(f, grid)
    sq = (fv * fv) @ grid.weights
    out = np.sqrt(np.maximum(sq, 0.0))
    return float(out) if np.ndim(out) == 0 else out


def l2_dist(f, g, grid: EvalGrid):
    return l2_norm(as_values(f, grid) - as_values(g, grid), grid)


def gram_matrix(funcs, grid: EvalGrid) -> np.ndarray:
    F = np.atleast_2d(as_values(funcs, grid))
    G = (F * grid.weights) @ F.T
    return 0.5 * (G + G.T)


def cross_gram(F, S, grid: EvalGrid) -> np.ndarray:
    """Matrix of inner products <F_i, S_j>."""
    F = np.atleast_2d(as_values(F, grid))
    S = np.atleast_2d(as_values(S, grid))
    return (F * grid.weights) @ S.T


def pairwise_distances(funcs, grid: EvalGrid) -> np.ndarray:
    """All pairwise L2 distances between rows."""
    F = np.atleast_2d(as_values(funcs, grid))
    G = gram_matrix(F, grid)
    d = np.diag(G)
    sq = d[:, None] + d[None, :] - 2.0 * G
    np.fill_diagonal(sq, 0.0)
    # the Gram identity loses digits for nearby functions; recompute those exactly
    scale = d[:, None] + d[None, :]
    close = sq <= 1e-8 * np.maximum(scale, 1e-300)
    if np.any(close):
        ii, jj = np.nonzero(np.triu(close, k=1))
        for i, j in zip(ii, jj):
            diff = F[i] - F[j]
            sq[i, j] = sq[j, i] = float((diff * diff) @ grid.weights)
    return np.sqrt(np.maximum(sq, 0.0))


def span_ridge(gram: np.ndarray) -> float:
    k = gram.shape[0]
    return 1e-10 * float(np.trace(gram)) / k if k else 0.0


def project_off_span(F, span, grid: EvalGrid) -> np.ndarray:
    """Residuals of the rows of ``F`` after removing their projection onto span.

    The projection coefficients solve ``(Gram + lam I) c = b`` with a tiny
    ridge ``lam = 1e-10 trace(Gram)/|span|`` so nearly collinear spans stay
    solvable; one step of iterative refinement then removes the ridge bias
    wherever the span is well conditioned.
    """
    Fv = as_values(F, grid)
    single = Fv.ndim == 1
    Fm = np.atleast_2d(Fv)
    S = as_values(span, grid) if len(span) else np.empty((0, grid.size))
    S = np.atleast_2d(S)
    if S.shape[0] == 0:
        out = Fm.copy()
    else:
        G = gram_matrix(S, grid)
        lam = span_ridge(G)
        B = cross_gram(S, Fm, grid)
        A = G + lam * np.eye(G.shape[0])
        try:
            solve = lambda R: np.linalg.solve(A, R)
            C = solve(B)
        except np.linalg.LinAlgError:
            solve = lambda R: np.linalg.lstsq(A, R, rcond=None)[0]
            C = solve(B)
        # one refinement step removes the O(lam) bias on well-conditioned spans
        C = C + solve(B - G @ C)
        out = Fm - C.T @ S
    return out[0] if single else out


def project_onto_span(f: FuncSample, span, grid: EvalGrid) -> FuncSample:
    """Return ``f - P_span(f)`` as a FuncSample."""
    return FuncSample(project_off_span(f, list(span), grid), grid)


def symmetric_eigvals(A: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in decreasing order."""
    A = np.asarray(A, dtype=float)
    return np.linalg.eigvalsh(0.5 * (A + A.T))[::-1]
