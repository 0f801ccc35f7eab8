"""Split, cross and weighted conformal intervals for functionals of the target.

Conformity scores are ``|Phi(f_hat_i) - Phi(f_tilde_i)|`` where ``f_tilde_i``
is the pipeline prediction from study ``i``'s covariates.  A functional with
several outputs (e.g. evaluation at many grid points) is handled column by
column, each column getting its own quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .function_space import EvalGrid, as_values
from .pipeline import PipelineConfig, fit_pipeline, study_arrays


@dataclass(frozen=True, eq=False)
class Functional:
    """Linear functional(s) of a grid-sampled function.

    ``kind`` is ``"point"`` (evaluation at grid indices), ``"mean"`` (the
    grid-weighted mean, i.e. an average treatment effect) or ``"weights"``
    (a user table of grid weights).
    """

    kind: str
    grid: EvalGrid
    indices: np.ndarray | None = None
    table: np.ndarray | None = None

    @classmethod
    def point_eval(cls, grid: EvalGrid, x) -> "Functional":
        """Evaluation at the grid point(s) nearest to ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.abs(grid.x[None, :] - x[:, None]).argmin(axis=1)
        return cls("point", grid, indices=idx)

    @classmethod
    def pointwise(cls, grid: EvalGrid) -> "Functional":
        return cls("point", grid, indices=np.arange(grid.size))

    @classmethod
    def mean(cls, grid: EvalGrid) -> "Functional":
        return cls("mean", grid)

    @classmethod
    def weighted(cls, grid: EvalGrid, weights) -> "Functional":
        w = np.asarray(weights, dtype=float)
        if w.shape[-1] != grid.size:
            raise ValueError("functional weights must match the grid")
        return cls("weights", grid, table=np.atleast_2d(w))

    @property
    def labels(self) -> np.ndarray:
        if self.kind == "point":
            return self.grid.points[self.indices, 0]
        if self.kind == "mean":
            return np.array(["ate"])
        return np.array([f"phi{j}" for j in range(self.table.shape[0])])

    def __call__(self, F) -> np.ndarray:
        """Values of the functional(s); shape (n_functions, n_outputs)."""
        Fm = np.atleast_2d(as_values(F, self.grid))
        if self.kind == "point":
            return Fm[:, self.indices]
        if self.kind == "mean":
            return (Fm @ self.grid.weights)[:, None]
        if self.kind == "weights":
            return Fm @ self.table.T
        raise ValueError(f"unknown functional kind {self.kind!r}")


@dataclass
class PredictionInterval:
    center: np.ndarray
    half_width: np.ndarray
    alpha: float
    method: str = "split"
    labels: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.half_width = np.atleast_1d(np.asarray(self.half_width, dtype=float))
        if np.any(self.half_width < 0):
            raise ValueError("negative half-width")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_width

    def contains(self, value) -> np.ndarray:
        v = np.asarray(value, dtype=float)
        return (v >= self.lo) & (v <= self.hi)

    def rows(self) -> list:
        labels = self.labels if self.labels is not None else np.arange(len(self.center))
        return [{"x": lab, "center": c, "lo": c - h, "hi": c + h,
                 "method": self.method, "alpha": self.alpha}
                for lab, c, h in zip(labels, self.center, self.half_width)]


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def quantile_index(n: int, alpha: float) -> int:
    """1-based rank ``ceil((1 - alpha)(n + 1))``."""
    return int(math.ceil((1.0 - alpha) * (n + 1) - 1e-9))


def conformal_quantile(residuals, alpha: float):
    """The ``ceil((1-alpha)(n+1))``-th smallest residual, or ``inf`` past the end.

    Works column-wise for 2-D input (rows are calibration studies).
    """
    _check_alpha(alpha)
    R = np.asarray(residuals, dtype=float)
    if R.shape[0] == 0:
        raise ValueError("no calibration residuals")
    n = R.shape[0]
    k = quantile_index(n, alpha)
    if k > n:
        out = np.full(R.shape[1:], np.inf)
    else:
        out = np.partition(R, k - 1, axis=0)[k - 1]
    return float(out) if np.ndim(out) == 0 else out


def weighted_quantile(residuals, weights, alpha: float):
    """Weighted conformal quantile with the target carrying mass ``max(weights)``.

    Masses are ``w_i / (sum w + w_0)``; returns the smallest residual whose
    cumulative mass reaches ``1 - alpha``, else ``inf``.  Column-wise for 2-D
    residuals.
    """
    _check_alpha(alpha)
    R = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float).ravel()
    if R.shape[0] == 0:
        raise ValueError("no calibration residuals")
    if w.shape[0] != R.shape[0]:
        raise ValueError("weights and residuals differ in length")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    single = R.ndim == 1
    R2 = R[:, None] if single else R.reshape(R.shape[0], -1)
    mass = w / (w.sum() + w.max())
    order = np.argsort(R2, axis=0, kind="stable")
    cum = np.cumsum(mass[order], axis=0)
    reach = cum >= (1.0 - alpha) - 1e-12
    hit = reach.any(axis=0)
    first = np.argmax(reach, axis=0)
    cols = np.arange(R2.shape[1])
    out = np.where(hit, R2[order[first, cols], cols], np.inf)
    if single:
        return float(out[0])
    return out.reshape(R.shape[1:])


def _split_indices(m: int, split_fraction: float, seed):
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    n_tr = int(round(split_fraction * m))
    train, cal = np.sort(perm[:n_tr]), np.sort(perm[n_tr:])
    if len(cal) < 2:
        raise ValueError(f"only {len(cal)} calibration studies after the split; need >= 2")
    return train, cal


def _fit(W, F, grid, cfg, context):
    try:
        return fit_pipeline(W, F, grid, cfg)
    except Exception as exc:
        raise type(exc)(f"{context}: {exc}") from exc


def calibration_scores(pipe, W_cal, F_cal, functional: Functional) -> np.ndarray:
    return np.abs(functional(F_cal) - functional(pipe.predict_values(W_cal)))


def split_conformal_arrays(W, F, grid: EvalGrid, W0, functional: Functional, alpha: float,
                           split_fraction: float = 0.7, seed=0,
                           pipeline_config: PipelineConfig | None = None):
    """Array form of :func:`split_conformal` for many targets at once.

    Returns ``(center, half_width)`` with ``center`` of shape
    (n_targets, n_outputs) and ``half_width`` of shape (n_outputs,).
    """
    _check_alpha(alpha)
    cfg = pipeline_config or PipelineConfig()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    F = np.atleast_2d(as_values(F, grid))
    train, cal = _split_indices(F.shape[0], split_fraction, seed)
    pipe = _fit(W[train], F[train], grid, cfg, "split-conformal training fit")
    scores = calibration_scores(pipe, W[cal], F[cal], functional)
    half = conformal_quantile(scores, alpha)
    center = functional(pipe.predict_values(np.atleast_2d(W0)))
    return center, np.atleast_1d(half)


def split_conformal(studies, W0, functional: Functional, alpha: float = 0.05,
                    split_fraction: float = 0.7, seed=0,
                    pipeline_config: PipelineConfig | None = None,
                    grid: EvalGrid | None = None) -> PredictionInterval:
    grid = grid or functional.grid
    W, F = study_arrays(studies, grid)
    center, half = split_conformal_arrays(W, F, grid, np.atleast_2d(W0), functional, alpha,
                                          split_fraction, seed, pipeline_config)
    return PredictionInterval(center[0], half, alpha, "split", functional.labels)


def cross_conformal_arrays(W, F, grid: EvalGrid, W0, functional: Functional, alpha: float,
                           folds: int = 5, seed=0, pipeline_config: PipelineConfig | None = None,
                           fold_ids=None):
    """Array form of :func:`cross_conformal`; returns ``(center, half_width, n_scores)``."""
    _check_alpha(alpha)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    cfg = pipeline_config or PipelineConfig()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    F = np.atleast_2d(as_values(F, grid))
    m = F.shape[0]
    if fold_ids is None:
        perm = np.random.default_rng(seed).permutation(m)
        parts = [np.sort(p) for p in np.array_split(perm, folds)]
    else:
        fold_ids = np.asarray(fold_ids)
        parts = [np.nonzero(fold_ids == j)[0] for j in np.unique(fold_ids)]
    scores, centers = [], []
    W0 = np.atleast_2d(W0)
    for j, test in enumerate(parts):
        train = np.setdiff1d(np.arange(m), test)
        pipe = _fit(W[train], F[train], grid, cfg, f"cross-conformal fold {j}")
        scores.append(calibration_scores(pipe, W[test], F[test], functional))
        centers.append(functional(pipe.predict_values(W0)))
    pooled = np.vstack(scores)
    half = conformal_quantile(pooled, alpha)
    return np.mean(centers, axis=0), np.atleast_1d(half), pooled.shape[0]


def cross_conformal(studies, W0, functional: Functional, alpha: float = 0.05, folds: int = 5,
                    seed=0, pipeline_config: PipelineConfig | None = None,
                    grid: EvalGrid | None = None, fold_ids=None) -> PredictionInterval:
    """K-fold conformal: out-of-fold scores pooled, center averaged over folds.

    ``fold_ids`` fixes the fold of every study; otherwise folds are a seeded
    random partition.
    """
    grid = grid or functional.grid
    W, F = study_arrays(studies, grid)
    center, half, n = cross_conformal_arrays(W, F, grid, np.atleast_2d(W0), functional, alpha,
                                             folds, seed, pipeline_config, fold_ids)
    return PredictionInterval(center[0], half, alpha, "cross", functional.labels,
                              flags={"n_scores": n})


def median_pairwise_distance(W) -> float:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    iu = np.triu_indices(W.shape[0], k=1)
    D = np.sqrt(((W[:, None, :] - W[None, :, :]) ** 2).sum(axis=-1))
    return float(np.median(D[iu])) if len(iu[0]) else 0.0


def kernel_weights(W_cal, W0, bandwidth: float) -> np.ndarray:
    d2 = ((np.atleast_2d(W_cal) - np.asarray(W0, dtype=float)) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def _weighted_half(scores, W_cal, W0_row, h, alpha):
    if h <= 0:
        return conformal_quantile(scores, alpha), True
    w = kernel_weights(W_cal, W0_row, h)
    if not np.any(w > 0):
        return conformal_quantile(scores, alpha), True
    return weighted_quantile(scores, w, alpha), False


def weighted_conformal_arrays(W, F, grid: EvalGrid, W0, functional: Functional, alpha: float,
                              bandwidth_multiplier: float = 3.0, split_fraction: float = 0.7,
                              seed=0, pipeline_config: PipelineConfig | None = None):
    """Array form of :func:`weighted_conformal` for many targets sharing one fit.

    Returns ``(center, half_width, flags)``; both arrays have shape
    (n_targets, n_outputs) since the weights depend on the target.
    """
    _check_alpha(alpha)
    cfg = pipeline_config or PipelineConfig()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    F = np.atleast_2d(as_values(F, grid))
    W0 = np.atleast_2d(np.asarray(W0, dtype=float))
    train, cal = _split_indices(F.shape[0], split_fraction, seed)
    pipe = _fit(W[train], F[train], grid, cfg, "weighted-conformal training fit")
    scores = calibration_scores(pipe, W[cal], F[cal], functional)
    center = functional(pipe.predict_values(W0))
    h_med = median_pairwise_distance(W)
    h = bandwidth_multiplier * h_med
    flags = {"h_med": h_med, "bandwidth": h}
    half = np.empty_like(center)
    fallback = False
    for j in range(W0.shape[0]):
        half[j], fb = _weighted_half(scores, W[cal], W0[j], h, alpha)
        fallback |= fb
    if fallback:
        flags["unweighted_fallback"] = True
    return center, half, flags


def weighted_conformal(studies, W0, functional: Functional, alpha: float = 0.05,
                       bandwidth_multiplier: float = 3.0, split_fraction: float = 0.7, seed=0,
                       pipeline_config: PipelineConfig | None = None,
                       grid: EvalGrid | None = None) -> PredictionInterval:
    """Split conformal with Gaussian-kernel weights on the calibration studies.

    Bandwidth is ``bandwidth_multiplier`` times the median pairwise distance
    between study covariates.  If all covariates coincide the unweighted
    quantile is used and ``flags["unweighted_fallback"]`` is set.
    """
    grid = grid or functional.grid
    W, F = study_arrays(studies, grid)
    W0 = np.asarray(W0, dtype=float).ravel()
    center, half, flags = weighted_conformal_arrays(W, F, grid, W0[None, :], functional, alpha,
                                                    bandwidth_multiplier, split_fraction, seed,
                                                    pipeline_config)
    return PredictionInterval(center[0], half[0], alpha, "weighted", functional.labels,
                              flags=flags)


def evaluate_coverage(truth, lo, hi, x=None, bins=None) -> dict:
    """Coverage and interval length, overall and per x-bin.

    ``truth``, ``lo``, ``hi`` (and ``x``) are flat arrays of matching length.
    """
    truth = np.asarray(truth, dtype=float).ravel()
    lo = np.broadcast_to(np.asarray(lo, dtype=float), truth.shape).ravel()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), truth.shape).ravel()
    covered = (truth >= lo) & (truth <= hi)
    length = hi - lo
    report = {"coverage": float(covered.mean()) if covered.size else float("nan"),
              "mean_length": float(length.mean()) if length.size else float("nan"),
              "n": int(truth.size), "bins": []}
    if x is not None and bins is not None:
        x = np.asarray(x, dtype=float).ravel()
        edges = np.asarray(bins, dtype=float)
        which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
        for b in range(len(edges) - 1):
            sel = which == b
            if not sel.any():
                continue
            report["bins"].append({
                "x_lo": float(edges[b]), "x_hi": float(edges[b + 1]),
                "x_mid": float(np.median(x[sel])),
                "coverage": float(covered[sel].mean()),
                "mean_length": float(length[sel].mean()),
                "n": int(sel.sum()),
            })
    return report
