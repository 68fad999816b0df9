"""Low-rank estimation for varying coefficient models.

The coefficient vector ``f(t)`` of ``Y = W^T f(t) + sigma xi`` is expanded in
an ``l``-element orthonormal dictionary; the resulting ``p x l`` coordinate
matrix is estimated by nuclear-norm penalized least squares.
"""

__version__ = "0.1.0"

from .basis import (
    ApproxSpec,
    DensityMeasure,
    Dictionary,
    DomainError,
    InvariantViolation,
    MeasureError,
    eval_basis,
    expand_function,
    gram_matrix,
    sup_norm_constant,
)
from .model import (
    DataFormatError,
    Dataset,
    Observation,
    ShapeError,
    VCFunction,
    design_inner,
    design_values,
    normalize_covariates,
    predict,
    residuals,
)
from .solver import (
    DivergenceError,
    SolverConfig,
    SolverError,
    SolverReport,
    gradient,
    lipschitz_bound,
    nuclear_norm,
    objective,
    solve,
    svt,
    zero_threshold,
)
from .tuning import (
    DesignMoments,
    NoiseSpec,
    TuningParams,
    beta_bound,
    design_moments,
    lambda_general,
    lambda_orthonormal,
    sample_thresholds,
    select_l,
)
from .simulate import Scenario, ground_truth_matrix, make_coefficients, sample_dataset
from .experiments import (
    ExperimentReport,
    bound_check,
    frobenius_error,
    lambda_grid_compare,
    mc_sigma_norms,
    mse_l2,
    pointwise_error,
    rate_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
