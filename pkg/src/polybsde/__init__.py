"""Regression-based theta-schemes for decoupled FBSDEs with monotone polynomial drivers."""

from .analysis import (
    ErrorRecord,
    RateFit,
    empirical_path_regularity,
    error_vs_truth,
    fit_rate,
    rate_geometric_sum_bound,
    self_convergence_e,
    summarize,
    variance_pathology_report,
)
from .backward_model import (
    BackwardModel,
    ModelConstants,
    TamingThresholds,
    builtin_model,
    compute_constants_c1_c2,
    compute_taming_thresholds,
    fhn_exact_gradient,
    fhn_exact_solution,
    truncate,
)
from .counterexample import (
    conditioned_bound_check,
    counterexample_divergence_stat,
    counterexample_iterate,
    deterministic_bound_holds,
)
from .forward import ForwardModel, GridSpec, PathEnsemble, coupled_refinement, simulate_forward
from .regression import BasisSpec, Projector, RegressionOperator, condexp, evaluate, fit
from .schemes import (
    BackwardSolution,
    NewtonParams,
    SchemeConfig,
    run_tamed_explicit,
    run_theta_scheme,
    solve_implicit_y,
    theta_backward_step,
)

__version__ = "0.1.0"
