"""Stability-constrained scheduling under dynamic-parameter uncertainty.

Pipeline: grid-strength evaluation -> boundary-aware surrogate regression ->
moment propagation through the regression optimum -> distributionally robust
second-order-cone stability constraint -> unit commitment, with Monte Carlo
validation harnesses throughout.
"""

from .network import (
    Branch,
    GflUnit,
    GridModel,
    Source,
    build_admittance,
    d_Ydd_dXg,
    evaluate_gscr,
    gscr_index,
    kron_reduce,
    load_grid,
)
from .qp import QpInfeasibleError, QpResult, QpUnboundedError, solve_qp
from .regression import (
    CoefficientFit,
    Dataset,
    HardBoundaryRegression,
    RegionPartition,
    SmoothBoundaryRegression,
    SmoothRegressionConfig,
    augment,
    choose_nu,
    fit_hard,
    fit_smooth,
    gaussian_weight,
    generate_dataset,
    partition,
    sigmoid_gamma,
)
from .pipeline import CoefficientMap
from .sensitivity import (
    CoefficientJacobian,
    MomentEstimate,
    UncertainParameterSpec,
    dK_dg,
    assemble_kkt_perturbation,
    dg_dp,
    grad_f,
    hessian_diag_f,
    index_sensitivity,
    propagate_moments,
)
from .chance import (
    SocStabilityConstraint,
    equivalent_limit,
    evaluate_soc,
    k_eta,
    spectral_factorize,
)
from .scheduler import (
    DeterministicStability,
    Schedule,
    UcInstance,
    UnitParams,
    build_uc,
    evaluate_schedule,
    load_instance,
    solve_uc,
)
from .validation import (
    McConfig,
    cv_sweep,
    fixed_margin_baseline,
    mape,
    mc_moments,
)

__all__ = [name for name in dir() if not name.startswith("_")]
