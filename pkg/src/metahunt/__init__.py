"""Meta-analytic prediction of target functions from study-level summaries.

Study functions are assumed to be convex combinations of a few latent basis
functions.  The package recovers the bases by denoised functional successive
projection, regresses the mixing weights on study covariates, predicts the
target function and wraps it in conformal intervals.
"""

from .function_space import (
    EvalGrid, FuncSample, GridMismatchError, gram_matrix, inner_product, l2_dist, l2_norm,
    project_onto_span,
)
from .basis_hunting import (
    BasisSet, DenoiseParams, EmptyAfterDenoisingError, GeometryDiagnostics, check_thmA1_bound,
    default_tuning, denoise, dfspa, fspa, geometry_diagnostics, matching_error,
)
from .weight_estimation import (
    KSelectionReport, SimplexWeights, cv_select_k, elbow_curve, project_to_hull,
    reconstruction_error,
)
from .weight_model import (
    DirichletRegParams, FeatureMap, FitError, LogRatioRegParams, fit_dirichlet, fit_logratio,
    predict_weights,
)
from .pipeline import (
    PipelineConfig, StudyRecord, TrainedPipeline, fit_pipeline, fit_studies, predict_function,
)
from .conformal import (
    Functional, PredictionInterval, conformal_quantile, cross_conformal, evaluate_coverage,
    split_conformal, weighted_conformal, weighted_quantile,
)

__version__ = "0.1.0"
