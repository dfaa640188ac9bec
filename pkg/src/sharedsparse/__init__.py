"""Shared-sparsity stochastic optimal control for linear elliptic PDEs."""

from .estimator import SharedSparsityControl
from .grid import (
    BoundarySpec,
    DiscreteOperator,
    Grid2D,
    OperatorSingularError,
    assemble,
    boundary_injection,
    inner_l2,
    norm_l2,
    solve,
)
from .lowrank import (
    ForcingBasis,
    LowRankSym,
    build_forcing_basis,
    eig_lowrank,
    trace_ratio_estimate,
    truncation_bound,
)
from .optimizer import (
    ConvergenceRecord,
    ReducedProblem,
    SolveResult,
    SolverConfig,
    cost_units,
    gradient,
    hessvec,
    irls_solve,
    irls_update,
    nirls_solve,
    objective_reduced,
    pcg,
    precond_diag,
)
from .prior import GaussianPrior, boundary_prior, domain_prior
from .problems import (
    ProblemSpec,
    build_problem,
    deterministic_reduce,
    offline_setup,
    online_control,
    shared_support,
    truncation_estimate,
)
from .reweighted import SnuOperator, second_moment, snu_apply, snu_build, snu_diag

__version__ = "0.1.0"
