"""robustfuse: combine parameter estimates from many sources, some biased.

The pipeline has two stages. A weighted geometric median pools the per-source
estimates into a centre that a minority (by weight) of arbitrarily biased
sources cannot move far. A group-penalized inverse-variance stage then fits a
per-source bias vector with an adaptive penalty built from the pooled centre,
driving the biases of trustworthy sources to exactly zero, and combines the
surviving sources efficiently. Wald inference treats the selected set as
fixed.
"""

from .exceptions import (
    DimensionMismatchError,
    EmptySelectionError,
    FusionError,
    IdentificationFailureError,
    InvalidContrastError,
    InvalidCovarianceError,
    InvalidDesignError,
    InvalidGroundTruthError,
    InvalidProblemError,
    InvalidWeightingMatrixError,
    MissingCovarianceError,
    NotConvergedError,
    ParseError,
    SingularSystemError,
)
from .geomedian import (
    GeoMedianConfig,
    consistency_bound_check,
    delta_margin,
    median_objective,
    solve_initial,
    weighted_geometric_median,
)
from .inference import WaldTestResult, estimate_covariance, wald_interval, wald_test
from .io import load_problem, write_summary_csv, write_summary_json
from .model import (
    IDENTITY,
    INVERSE_COVARIANCE,
    Diagnostics,
    FusionEstimate,
    FusionProblem,
    GroundTruth,
    SourceSummary,
    compute_weights,
    resolve_weighting_matrices,
)
from .pivw import (
    KktReport,
    PenaltyConfig,
    SolverConfig,
    adaptive_weights,
    group_prox,
    ivw_combine,
    kkt_residual,
    oracle_ivw,
    penalized_objective,
    solve_penalized_ivw,
)
from .simulate import (
    CounterexampleResult,
    SimDesign,
    SimMetrics,
    SimReport,
    bias_matrix,
    counterexample_median,
    design_preset,
    dgp_linear,
    dgp_logistic,
    dgp_mr,
    make_truth,
    mr_profile,
    run_replications,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
