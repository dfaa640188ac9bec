"""Model problems on the unit square and the offline/online glue.

Three presets are provided:

``poisson-neumann``
    ``-Laplace y = u + f`` with uncertain Neumann data on the left side.
``poisson-rhs``
    Same operator and data, uncertain source field over the domain.
``helmholtz``
    ``-Laplace y - kappa^2 y = u`` with uncertain Neumann data on the left
    side and ``y_d = f = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .grid import BoundarySpec, DiscreteOperator, Grid2D, injection_matrix, inner_l2
from .lowrank import ForcingBasis, LowRankSym, build_forcing_basis, eig_lowrank, truncation_bound
from .optimizer import ReducedProblem
from .prior import GaussianPrior, boundary_prior, domain_prior
from .reweighted import SnuOperator

logger = logging.getLogger(__name__)

KINDS = ("poisson-neumann", "poisson-rhs", "helmholtz")

_DEFAULTS = {
    "poisson-neumann": dict(alpha=1e-5, beta=1e-3, gamma=4.0, kappa=0.0, rank=180, rank_forcing=16),
    "poisson-rhs": dict(alpha=5e-5, beta=1e-3, gamma=400.0, kappa=0.0, rank=180, rank_forcing=64),
    "helmholtz": dict(alpha=5e-5, beta=5e-4, gamma=4.0, kappa=12.0, rank=150, rank_forcing=16),
}


def desired_state_poisson(x, y):
    return np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y) * np.exp(2 * x) / 6.0


@dataclass
class ProblemSpec:
    """Problem parameters; ``None`` entries take the preset defaults."""

    kind: str = "poisson-neumann"
    n: int = 64
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    kappa: float | None = None
    rank: int | None = None
    rank_forcing: int | None = None
    m0: float = 0.0
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; choose from {KINDS}")
        for key, val in _DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.alpha <= 0 or self.beta <= 0 or self.gamma < 0:
            raise ValueError("need alpha > 0, beta > 0, gamma >= 0")


@dataclass
class AssembledProblem:
    spec: ProblemSpec
    grid: Grid2D
    A: DiscreteOperator
    prior: GaussianPrior
    B: sp.csr_matrix
    y_d: np.ndarray
    f: np.ndarray

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def yhat_d(self) -> np.ndarray:
        return self.y_d - self.A.solve(self.f)


def build_problem(spec: ProblemSpec) -> AssembledProblem:
    grid = Grid2D(spec.n)
    bc = BoundarySpec.left_neumann()
    x, y = grid.centers()
    if spec.kind == "helmholtz":
        A = DiscreteOperator(grid, bc, kind="helmholtz", kappa=spec.kappa)
        y_d = np.zeros(grid.N)
    else:
        A = DiscreteOperator(grid, bc, kind="laplace")
        y_d = desired_state_poisson(x, y)
    f = np.zeros(grid.N)
    if spec.kind == "poisson-rhs":
        prior = domain_prior(grid, spec.gamma, mean=spec.m0)
        diag = np.ones(grid.N) if spec.mask is None else np.asarray(spec.mask, dtype=float).ravel()
        B = sp.diags(diag, format="csr")
    else:
        prior = boundary_prior(grid.n, spec.gamma, mean=spec.m0)
        B = injection_matrix(grid, bc, "left")
    return AssembledProblem(spec, grid, A, prior, B, y_d, f)


def deterministic_reduce(problem: AssembledProblem, basis: ForcingBasis | None = None):
    """Desired state of the mean-parameter deterministic problem.

    Returns
    -------
    tilde_y_d : ndarray
        ``y_d - A^{-1} f - A^{-1} B m0``.
    trace_const : float or None
        ``sum_i ||g_i||^2`` from ``basis`` when given.
    """
    A = problem.A
    tilde = problem.y_d - A.solve(problem.f) - A.solve(problem.B @ problem.prior.mean)
    trace_const = None
    if basis is not None:
        trace_const = problem.grid.h**2 * float(np.sum(basis.G**2))
    return tilde, trace_const


def offline_setup(problem: AssembledProblem, rank=None, rank_forcing=None, seed=0,
                  oversample=10, n_power=2, method="lanczos"):
    """Low-rank eigenpairs, forcing basis and the solver-facing bundle."""
    spec = problem.spec
    rank = spec.rank if rank is None else rank
    rank_forcing = spec.rank_forcing if rank_forcing is None else rank_forcing
    N = problem.N
    rank = min(rank, N)
    lowrank = eig_lowrank(problem.A.solve_normal, N, rank, oversample=oversample, seed=seed,
                          n_power=n_power, method=method)
    basis = build_forcing_basis(problem.A, problem.B, problem.prior, problem.y_d, problem.f,
                                rank_forcing, seed=seed + 1, oversample=oversample)
    return lowrank, basis, reduced_problem(problem, lowrank, basis)


def reduced_problem(problem: AssembledProblem, lowrank: LowRankSym, basis: ForcingBasis) -> ReducedProblem:
    tilde, trace_const = deterministic_reduce(problem, basis)
    const = 0.5 * inner_l2(problem.grid, tilde, tilde) + 0.5 * trace_const
    return ReducedProblem(lowrank, basis, problem.grid.h**2, const)


def online_control(nu_bar, lowrank: LowRankSym, basis: ForcingBasis, problem: AssembledProblem,
                   m_hat, alpha=None, beta=None):
    """Optimal control for one (or several, as columns) parameter fluctuations.

    ``m_hat`` is ``m - m0``. No PDE solves are needed.
    """
    m_hat = np.asarray(m_hat, dtype=float)
    if m_hat.shape[0] != problem.prior.dim:
        raise ValueError(f"parameter has {m_hat.shape[0]} rows, expected {problem.prior.dim}")
    alpha = problem.spec.alpha if alpha is None else alpha
    beta = problem.spec.beta if beta is None else beta
    snu = SnuOperator(lowrank, nu_bar, alpha, beta)
    rhs = lowrank.apply(problem.B @ m_hat)
    rhs = (basis.e0[:, None] if rhs.ndim == 2 else basis.e0) - rhs
    return snu.apply(rhs)


def shared_support(second_moment, samples, tau=None, rel_tau=1e-3):
    """Support mask from the second moment and the number of samples leaking out of it.

    Parameters
    ----------
    second_moment : ndarray of shape (N,)
    samples : ndarray of shape (N, k)
        Online controls as columns.
    tau : float, optional
        Threshold; defaults to ``rel_tau * max |samples|``.

    Returns
    -------
    dict with ``mask``, ``violations`` and ``tau``.
    """
    samples = np.asarray(samples, dtype=float).reshape(len(second_moment), -1)
    if tau is None:
        tau = rel_tau * float(np.max(np.abs(samples))) if samples.size else 0.0
    mask = np.sqrt(np.maximum(second_moment, 0.0)) > tau
    leaks = (~mask)[:, None] & (np.abs(samples) > tau)
    return {"mask": mask, "violations": int(np.count_nonzero(leaks)), "tau": float(tau)}


def k_spectrum(problem: AssembledProblem, count: int | None = None) -> np.ndarray:
    """Leading eigenvalues of ``A^{-T} A^{-1}`` from the separable spectrum of ``A``."""
    lam = np.sort(1.0 / problem.A.spectrum() ** 2)[::-1]
    return lam if count is None else lam[:count]


def truncation_estimate(problem: AssembledProblem, r: int, tail: int = 500, alpha=None) -> dict:
    """A-priori trace bound for keeping ``r`` eigenpairs, using ``tail`` extra ones."""
    alpha = problem.spec.alpha if alpha is None else alpha
    lam = k_spectrum(problem, r + tail)
    r_eff = min(r, lam.size)
    return {
        "bound": truncation_bound(lam, alpha, r_eff),
        "r": int(r),
        "r_effective": int(r_eff),
        "tail": int(lam.size - r_eff),
        "reduced_rank": bool(r > problem.N),
    }
