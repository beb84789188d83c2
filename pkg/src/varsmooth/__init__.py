"""Variational Gaussian filtering and smoothing for nonlinear state-space models.

The package fits chains of pairwise-joint Gaussian blocks to state posteriors
by maximizing a sigma-point approximation of the evidence lower bound under
marginal-consistency constraints, using exact first- and second-order
derivatives.  Reference estimators (Kalman/RTS, unscented variants, a
bootstrap particle filter and a 1-D grid filter/smoother) and divergence
metrics are included for evaluation, along with a command-line harness.
"""

from .exceptions import (
    ConfigError,
    ConstraintViolationError,
    DomainError,
    EvaluationError,
    GridRangeError,
    ModelConstructionError,
    VarsmoothError,
)
from .quadrature import QuadratureRule, expect, transform, unscented_rule
from .vi_core import (
    BlockChain,
    BlockDiagonalHessian,
    GaussianMarginal,
    JointBlock,
    block_from_joint,
    build_chain_problem,
    constraint_jacobian,
    constraints,
    elbo,
    elbo_gradient,
    elbo_hessian,
    marginal_next,
    marginal_prev,
    negative_entropy,
    random_feasible_chain,
    reconstruct_full_joint,
)
from .nlp_solver import NlpProblem, SolveOptions, SolveReport, kkt_solve, solve
from .estimators import (
    FilterResult,
    FilterStepResult,
    SmoothResult,
    init_filter_block,
    init_smoother_from_filter,
    init_smoother_from_measurements,
    init_smoother_from_unscented,
    is_diverged,
    vi_filter,
    vi_filter_step,
    vi_smooth,
)
from .baselines import (
    GridDensity,
    ParticleEnsemble,
    bootstrap_pf,
    grid_filter,
    grid_smooth,
    kalman_filter,
    rts_smooth,
    ukf_filter,
    urtss_smooth,
)
from .metrics import js, kl_gauss_gauss, kl_grid_gaussian, position_error, skl
from .models import (
    Dataset,
    GaussianPrior,
    GrowthModel,
    LinearGaussianModel,
    RobotModel,
    ScalarCorrectionModel,
    StateSpaceModel,
    VmfTrackingModel,
    log_bessel_i0,
    make_growth_model,
    make_illustrative_model,
    make_linear_model,
    make_robot_model,
    make_vmf_tracking_model,
    simulate,
)

__version__ = "0.1.0"
