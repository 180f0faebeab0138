"""Federated adaptive estimation of target average treatment effects."""

from .aggregate import (
    AggregationProblem,
    AggregationResult,
    DEFAULT_LAMBDA_GRID,
    face_ci,
    face_estimate,
    face_variance,
    select_lambda,
    solve_eta,
)
from .data import (
    Basis,
    ParseError,
    SiteData,
    SourceSummary,
    TargetSummary,
    ValidationError,
    load_site_csv,
    psi,
    psi_matrix,
)
from .estimator import FaceEstimator
from .federation import FederatedRun, ProtocolError
from .nuisance import (
    DensityRatioFit,
    LinearFit,
    LogisticFit,
    fit_density_ratio,
    fit_linear,
    fit_logistic,
)
from .pipeline import PipelineConfig
from .simulate import SimConfig, SimReport, run_study, true_tate
from .source_step import source_augmentation, source_d_hat, source_sigma2, source_site_summary
from .target_step import (
    combine_target_summaries,
    target_components,
    target_sigma,
    target_site_summary,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationProblem",
    "AggregationResult",
    "Basis",
    "DEFAULT_LAMBDA_GRID",
    "DensityRatioFit",
    "FaceEstimator",
    "FederatedRun",
    "LinearFit",
    "LogisticFit",
    "ParseError",
    "PipelineConfig",
    "ProtocolError",
    "SimConfig",
    "SimReport",
    "SiteData",
    "SourceSummary",
    "TargetSummary",
    "ValidationError",
    "combine_target_summaries",
    "face_ci",
    "face_estimate",
    "face_variance",
    "fit_density_ratio",
    "fit_linear",
    "fit_logistic",
    "load_site_csv",
    "psi",
    "psi_matrix",
    "run_study",
    "select_lambda",
    "solve_eta",
    "source_augmentation",
    "source_d_hat",
    "source_sigma2",
    "source_site_summary",
    "target_components",
    "target_sigma",
    "target_site_summary",
    "true_tate",
]
