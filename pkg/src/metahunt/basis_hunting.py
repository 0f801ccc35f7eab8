"""Denoised functional successive projection (d-fSPA) and geometry diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .function_space import (
    EvalGrid,
    FuncSample,
    as_values,
    l2_norm,
    pairwise_distances,
    project_off_span,
    symmetric_eigvals,
)

DENOISED = -1  # source index for bases that are neighbourhood averages


class EmptyAfterDenoisingError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiseParams:
    N: int = 1
    delta: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta!r}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "delta", float(self.delta))


@dataclass(frozen=True, eq=False)
class BasisSet:
    values: np.ndarray          # (K, G)
    source_indices: tuple
    grid: EvalGrid
    residual_norms: tuple = ()  # norm of the selected residual at each step

    def __post_init__(self):
        v = np.atleast_2d(np.array(self.values, dtype=float))
        if v.shape[0] < 1:
            raise ValueError("a BasisSet needs at least one basis")
        if v.shape[1] != self.grid.size:
            raise ValueError("basis values do not match the grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source_indices", tuple(int(i) for i in self.source_indices))

    def __len__(self):
        return self.values.shape[0]

    @property
    def bases(self):
        return [FuncSample(v, self.grid) for v in self.values]

    def prefix(self, k: int) -> "BasisSet":
        return BasisSet(self.values[:k], self.source_indices[:k], self.grid,
                        self.residual_norms[:k])


@dataclass(frozen=True)
class GeometryDiagnostics:
    beta: float
    gamma_upper: float
    d_max: float
    sigma_star: float


@dataclass
class DenoiseResult:
    functions: np.ndarray   # (m', G) denoised functions
    kept: np.ndarray        # original index of each retained function
    neighbourhood_sizes: np.ndarray
    singleton: np.ndarray   # True where the neighbourhood is just the study itself


def denoise(functions, params: DenoiseParams, grid: EvalGrid) -> DenoiseResult:
    """Prune isolated functions and average the rest over their Delta-balls.

    Neighbourhoods are taken on the original inputs in one pass.
    """
    F = np.atleast_2d(as_values(functions, grid))
    if F.shape[0] == 0:
        raise ValueError("no functions to denoise")
    D = pairwise_distances(F, grid)
    A = D <= params.delta
    np.fill_diagonal(A, True)
    sizes = A.sum(axis=1)
    kept = np.nonzero(sizes >= params.N)[0]
    if kept.size == 0:
        raise EmptyAfterDenoisingError(
            f"all {F.shape[0]} functions dropped by denoising "
            f"(N={params.N}, delta={params.delta:g}); lower N or raise delta")
    Ak = A[kept].astype(float)
    out = (Ak @ F) / sizes[kept][:, None]
    # exact copies where nothing is averaged
    single = sizes[kept] == 1
    out[single] = F[kept[single]]
    return DenoiseResult(out, kept, sizes[kept], single)


def fspa(functions, k_hat: int, grid: EvalGrid, index_map=None) -> BasisSet:
    """Greedy successive projection: pick the largest residual, project it out."""
    F = np.atleast_2d(as_values(functions, grid))
    m = F.shape[0]
    if int(k_hat) != k_hat or k_hat < 1:
        raise ValueError(f"k_hat must be a positive integer, got {k_hat!r}")
    if k_hat > m:
        raise ValueError(f"k_hat={k_hat} exceeds the number of functions ({m})")
    selected, norms = [], []
    H = F
    for _ in range(k_hat):
        if selected:
            H = project_off_span(F, F[selected], grid)
        r = l2_norm(H, grid)
        s = int(np.argmax(r))
        selected.append(s)
        norms.append(float(r[s]))
    src = selected if index_map is None else [int(index_map[s]) for s in selected]
    return BasisSet(F[selected], tuple(src), grid, tuple(norms))


def dfspa(functions, k_hat: int, params: DenoiseParams, grid: EvalGrid) -> BasisSet:
    den = denoise(functions, params, grid)
    if k_hat > den.functions.shape[0]:
        raise ValueError(
            f"k_hat={k_hat} exceeds the {den.functions.shape[0]} functions kept by denoising")
    index_map = np.where(den.singleton, den.kept, DENOISED)
    return fspa(den.functions, k_hat, grid, index_map=index_map)


def heuristic_N(m: int) -> int:
    """max(1, round-half-up(0.5 ln m))."""
    return max(1, int(math.floor(0.5 * math.log(m) + 0.5)))


def delta_divisor(m: int, schedule: bool = False) -> float:
    """Divisor of the max pairwise distance; with ``schedule`` it grows with m above 100."""
    if schedule and m >= 100:
        return 0.2 * (m - 100) + 10.0
    return 10.0


def default_tuning(functions, grid: EvalGrid, m: int | None = None,
                   schedule: bool = False) -> DenoiseParams:
    F = np.atleast_2d(as_values(functions, grid))
    m = F.shape[0] if m is None else int(m)
    if m < 2:
        raise ValueError("heuristic tuning needs m >= 2")
    dmax = float(pairwise_distances(F, grid).max()) if F.shape[0] > 1 else 0.0
    return DenoiseParams(heuristic_N(m), dmax / delta_divisor(m, schedule))


def theoretical_tuning(delta_m: float, gamma: float, n_min: int, a: float, r: float,
                       min_near_pure: int, C: float = 5.0, c: float = 1.0) -> DenoiseParams:
    """Denoising parameters from purity level and estimation-error rate.

    ``Delta = C (delta_m gamma + n_min^((a - r)/2))``,
    ``N = floor(c min_k M_k(delta_m))``.
    """
    delta = C * (delta_m * gamma + n_min ** ((a - r) / 2.0))
    return DenoiseParams(max(1, int(math.floor(c * min_near_pure))), delta)


def near_pure_counts(pi: np.ndarray, eta: float) -> np.ndarray:
    """Number of studies with weight >= 1 - eta on each vertex."""
    return (np.asarray(pi) >= 1.0 - eta).sum(axis=0)


def matching_error(recovered, truth, grid: EvalGrid):
    """Bottleneck matching of truth to recovered bases.

    Returns ``(max_k ||ghat_pi(k) - g_k||, assignment)`` where the assignment
    minimises the largest matched distance.
    """
    R = np.atleast_2d(as_values(_vals(recovered), grid))
    T = np.atleast_2d(as_values(_vals(truth), grid))
    D = np.atleast_2d(l2_norm(T[:, None, :] - R[None, :, :], grid))
    kt, kr = D.shape
    if kt > kr:
        raise ValueError("more true bases than recovered ones")
    if kt <= 7 and kr == kt:
        best, arg = np.inf, None
        for p in permutations(range(kr)):
            v = D[np.arange(kt), p].max()
            if v < best:
                best, arg = v, p
        return float(best), np.asarray(arg)
    cand = np.unique(D)
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        cost = (D > cand[mid]).astype(float)
        r, c = linear_sum_assignment(cost)
        if cost[r, c].sum() == 0:
            hi = mid
        else:
            lo = mid + 1
    cost = np.where(D > cand[lo], 1.0, 0.0) + D * 1e-12
    r, c = linear_sum_assignment(cost)
    return float(D[r, c].max()), c


def _vals(b):
    return b.values if isinstance(b, BasisSet) else b


def centered_gram(basis, grid: EvalGrid) -> np.ndarray:
    S = np.atleast_2d(as_values(_vals(basis), grid))
    C = S - S.mean(axis=0)
    G = (C * grid.weights) @ C.T
    return 0.5 * (G + G.T)


def sigma_star(basis, grid: EvalGrid) -> float:
    S = np.atleast_2d(as_values(_vals(basis), grid))
    K = S.shape[0]
    if K < 2:
        return 0.0
    lam = symmetric_eigvals(centered_gram(S, grid))
    return float(np.sqrt(max(lam[K - 2], 0.0)))


def geometry_diagnostics(functions, basis, grid: EvalGrid) -> GeometryDiagnostics:
    """Distances describing how well ``functions`` fill the simplex of ``basis``."""
    from .weight_estimation import hull_weights

    F = np.atleast_2d(as_values(functions, grid))
    S = np.atleast_2d(as_values(_vals(basis), grid))
    _, dist_to_hull = hull_weights(F, S, grid)
    vert_gap = np.array([l2_norm(F - g, grid).min() for g in S])
    beta = max(float(dist_to_hull.max()), float(vert_gap.max()))
    norms = np.atleast_1d(l2_norm(S, grid))
    gbar = S.mean(axis=0)
    gamma_upper = float(np.atleast_1d(l2_norm(S - gbar, grid)).max())
    return GeometryDiagnostics(beta=beta, gamma_upper=gamma_upper,
                               d_max=float(norms.max()), sigma_star=sigma_star(S, grid))


@dataclass
class BoundReport:
    applicable: bool
    precondition_lhs: float
    precondition_rhs: float
    bound: float
    error: float
    holds: bool | None

    @property
    def message(self) -> str:
        if not self.applicable:
            return "bound not applicable"
        return "bound holds" if self.holds else "bound violated"


def check_thmA1_bound(diag: GeometryDiagnostics, recovered, truth, grid: EvalGrid | None = None
                      ) -> BoundReport:
    """Check the finite-sample fSPA recovery bound for one instance.

    Precondition ``450 d_max max(1, d_max/sigma) beta <= sigma^2``; if it holds,
    the matching error must not exceed
    ``(1 + 30 gamma/sigma max(1, d_max/sigma)) beta`` with the centroid
    radius standing in for gamma.
    """
    if len(_vals(recovered)) != len(_vals(truth)):
        raise ValueError("recovered and true basis sets differ in size")
    if grid is None:
        grid = truth.grid
    err, _ = matching_error(recovered, truth, grid)
    s, d, b, g = diag.sigma_star, diag.d_max, diag.beta, diag.gamma_upper
    if s <= 0:
        return BoundReport(False, math.inf, 0.0, math.inf, err, None)
    ratio = max(1.0, d / s)
    lhs = 450.0 * d * ratio * b
    rhs = s * s
    bound = (1.0 + 30.0 * g / s * ratio) * b
    if lhs > rhs:
        return BoundReport(False, lhs, rhs, bound, err, None)
    return BoundReport(True, lhs, rhs, bound, err, err <= bound + 1e-12)
