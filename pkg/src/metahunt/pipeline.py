"""End-to-end fit: basis hunting, hull weights, weight model, prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .basis_hunting import BasisSet, DenoiseParams, default_tuning, dfspa, fspa
from .function_space import EvalGrid, FuncSample, as_values
from .weight_estimation import hull_weights
from .weight_model import FeatureMap, fit_weight_model, predict_weight_matrix


@dataclass
class StudyRecord:
    W: np.ndarray
    f_hat: FuncSample
    id: str = ""
    f_true: FuncSample | None = None
    pi_true: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    k: int = 4
    denoise: bool = True
    N: int | None = None          # None: heuristic from the training size
    delta: float | None = None    # None: heuristic from the training functions
    delta_schedule: bool = False  # grow the Delta divisor with m above 100
    weight_model: str = "dirichlet"
    feature_kind: str = "identity"
    feature_degree: int = 1
    ridge_lambda: float = 0.0

    def feature_map(self) -> FeatureMap:
        return FeatureMap(self.feature_kind, self.feature_degree, True)

    def denoise_params(self, F, grid: EvalGrid) -> DenoiseParams:
        if not self.denoise:
            return DenoiseParams(1, 0.0)
        m = F.shape[0]
        if self.N is not None and self.delta is not None:
            return DenoiseParams(self.N, self.delta)
        h = default_tuning(F, grid, m, schedule=self.delta_schedule)
        return DenoiseParams(self.N if self.N is not None else h.N,
                             self.delta if self.delta is not None else h.delta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainedPipeline:
    """Recovered bases plus a fitted weight model: the prediction rule W -> f."""

    basis: BasisSet
    weight_params: object
    grid: EvalGrid
    config: PipelineConfig
    denoise_params: DenoiseParams | None = None
    pi_hat: np.ndarray | None = None
    recon_error: float = float("nan")

    def __post_init__(self):
        if self.weight_params.K != len(self.basis):
            raise ValueError("weight model and basis disagree on K")
        if self.basis.grid != self.grid:
            raise ValueError("basis and pipeline grids differ")

    @property
    def K(self) -> int:
        return len(self.basis)

    def predict_weights(self, W0) -> np.ndarray:
        return predict_weight_matrix(self.weight_params, W0)

    def predict_values(self, W0) -> np.ndarray:
        """Predicted function values, one row per covariate vector."""
        return self.predict_weights(W0) @ self.basis.values


def predict_function(pipeline: TrainedPipeline, W0, grid: EvalGrid | None = None) -> FuncSample:
    """Convex combination of the pipeline bases at the predicted weights."""
    grid = grid or pipeline.grid
    if grid != pipeline.grid:
        raise ValueError("prediction grid differs from the pipeline grid")
    W0 = np.asarray(W0, dtype=float)
    if W0.ndim != 1:
        raise ValueError("predict_function takes one covariate vector")
    return FuncSample(pipeline.predict_values(W0)[0], grid)


def study_arrays(studies, grid: EvalGrid):
    """Covariate matrix and function matrix from StudyRecords or an (W, F) pair."""
    if isinstance(studies, tuple) and len(studies) == 2:
        W, F = studies
        return np.atleast_2d(np.asarray(W, dtype=float)), np.atleast_2d(as_values(F, grid))
    W = np.vstack([np.atleast_1d(np.asarray(s.W, dtype=float)) for s in studies])
    F = as_values([s.f_hat for s in studies], grid)
    return W, np.atleast_2d(F)


def _finish(W, F, grid, basis, cfg, dparams) -> TrainedPipeline:
    P, resid = hull_weights(F, basis.values, grid)
    params = fit_weight_model(W, P, cfg.weight_model, cfg.feature_map(), cfg.ridge_lambda)
    return TrainedPipeline(basis, params, grid, cfg, dparams, P, float(np.mean(resid)))


def fit_pipeline(W, F, grid: EvalGrid, config: PipelineConfig | None = None) -> TrainedPipeline:
    cfg = config or PipelineConfig()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    F = np.atleast_2d(as_values(F, grid))
    dparams = cfg.denoise_params(F, grid)
    basis = dfspa(F, cfg.k, dparams, grid) if cfg.denoise else fspa(F, cfg.k, grid)
    return _finish(W, F, grid, basis, cfg, dparams)


def fit_pipeline_path(W, F, grid: EvalGrid, ks, config: PipelineConfig | None = None) -> dict:
    """Pipelines for several K sharing one basis-hunting run at max(ks)."""
    cfg = config or PipelineConfig()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    F = np.atleast_2d(as_values(F, grid))
    kmax = max(ks)
    dparams = cfg.denoise_params(F, grid)
    full = dfspa(F, kmax, dparams, grid) if cfg.denoise else fspa(F, kmax, grid)
    out = {}
    for k in ks:
        sub = PipelineConfig(**{**cfg.to_dict(), "k": int(k)})
        out[int(k)] = _finish(W, F, grid, full.prefix(int(k)), sub, dparams)
    return out


def fit_studies(studies, grid: EvalGrid, config: PipelineConfig | None = None) -> TrainedPipeline:
    W, F = study_arrays(studies, grid)
    return fit_pipeline(W, F, grid, config)
