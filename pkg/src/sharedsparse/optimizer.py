"""Reweighting solvers for the shared-sparsity control problem.

Everything here iterates on the weight field ``nu`` only. For a fixed
``nu`` the optimal control is Gaussian with mean ``S e0`` and modes
``-S e_i``, so one gradient evaluation costs ``rtilde + 1`` applications
of :class:`~sharedsparse.reweighted.SnuOperator`.

``gradient`` and ``hessvec`` return the unscaled quantities; the true
derivatives of :func:`objective_reduced` carry an extra factor ``beta / 2``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .lowrank import ForcingBasis, LowRankSym
from .reweighted import SnuOperator

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "ReducedProblem",
    "IterationRow",
    "ConvergenceRecord",
    "SolveResult",
    "gradient",
    "objective_reduced",
    "objective_control",
    "irls_update",
    "hessvec",
    "precond_diag",
    "pcg",
    "irls_solve",
    "nirls_solve",
    "cost_units",
    "optimality_residual",
]


@dataclass
class SolverConfig:
    """Solver settings.

    ``eps_schedule`` is either ``None`` (fixed ``eps``) or a pair
    ``(rho, eps_min)`` giving ``eps_k = max(rho**k * eps, eps_min)``.
    """

    alpha: float
    beta: float
    eps: float = 1e-7
    eps_schedule: tuple | None = None
    theta: float = 1.0
    n_cg: int = 3
    cg_rtol: float = 1e-2
    tol_grad: float = 1e-6
    max_iter: int = 500
    warmup_irls: int = 15
    warmup_theta: float = 1.5
    nu_damping: float = 0.9
    precond_floor: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.eps_schedule is not None:
            rho, eps_min = self.eps_schedule
            if not (0 < rho <= 1) or eps_min <= 0:
                raise ValueError("eps schedule needs 0 < rho <= 1 and eps_min > 0")
        if self.theta < 1 or self.warmup_theta < 1:
            raise ValueError("over-relaxation theta must be >= 1")
        if self.n_cg < 1:
            raise ValueError("n_cg must be >= 1")
        if not 0 < self.nu_damping < 1:
            raise ValueError("nu_damping must lie in (0, 1)")

    def eps_at(self, k: int) -> float:
        if self.eps_schedule is None:
            return self.eps
        rho, eps_min = self.eps_schedule
        return max(self.eps * rho**k, eps_min)


@dataclass
class ReducedProblem:
    """Offline factors needed by the solvers.

    Parameters
    ----------
    lowrank : LowRankSym
    basis : ForcingBasis
    cell_area : float
        Quadrature weight of one cell (``h**2``).
    const : float
        Control-independent part of the expected misfit.
    """

    lowrank: LowRankSym
    basis: ForcingBasis
    cell_area: float
    const: float = 0.0

    def __post_init__(self):
        self.forcings = self.basis.forcings()

    @property
    def N(self) -> int:
        return self.lowrank.N

    def norm(self, a) -> float:
        return float(np.sqrt(self.cell_area * np.dot(a, a)))

    def snu(self, nu, alpha, beta) -> SnuOperator:
        return SnuOperator(self.lowrank, nu, alpha, beta)


@dataclass
class IterationRow:
    iter: int
    method: str
    epsilon: float
    grad_norm: float
    objective: float
    cost_units: float
    n_cg: int


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)

    FIELDS = ("iter", "method", "epsilon", "grad_norm", "objective", "cost_units", "n_cg")

    def append(self, row: IterationRow):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def iterations(self) -> int:
        """Number of updates taken before the last recorded iterate."""
        return max(len(self.rows) - 1, 0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r.iter, r.method, repr(r.epsilon), repr(r.grad_norm),
                            repr(r.objective), repr(r.cost_units), r.n_cg])

    @classmethod
    def from_csv(cls, path):
        rec = cls()
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rec.append(IterationRow(int(d["iter"]), d["method"], float(d["epsilon"]),
                                        float(d["grad_norm"]), float(d["objective"]),
                                        float(d["cost_units"]), int(d["n_cg"])))
        return rec


@dataclass
class SolveResult:
    nu: np.ndarray
    u_mean: np.ndarray
    modes: np.ndarray
    second_moment: np.ndarray
    record: ConvergenceRecord
    converged: bool
    eps: float
    method: str


def gradient(snu: SnuOperator, forcings, nu, eps):
    """Reduced gradient ``sum_i (S e_i)^2 + eps^2 - nu^-2``.

    Returns
    -------
    G, s, modes : ndarray
        Gradient, second moment and the cached mode columns ``S e_i``.
    """
    s, modes = snu.second_moment(forcings)
    return s + eps**2 - 1.0 / nu**2, s, modes


def objective_reduced(snu: SnuOperator, forcings, nu, eps, cell_area, const=0.0, modes=None):
    """Reduced objective for the low-rank surrogate of ``A^{-T} A^{-1}``.

    With ``u_i = S e_i`` minimizing the quadratic part exactly, the expected
    misfit plus weighted control cost collapses to
    ``const - 1/2 sum_i <e_i, u_i>``.
    """
    if modes is None:
        modes = snu.apply(forcings)
    quad = -0.5 * cell_area * float(np.sum(forcings * modes))
    reg = 0.5 * snu.beta * cell_area * float(np.sum(eps**2 * nu + 1.0 / nu))
    return const + quad + reg


def objective_control(lowrank: LowRankSym, forcings, modes, alpha, beta, eps, cell_area, const=0.0):
    """``Q(u) + beta * int sqrt(||u||_Omega^2 + eps^2)`` for a Gaussian control.

    The control is given by its columns ``modes[:, i] = u_i`` paired with
    ``forcings[:, i] = e_i``; the misfit uses the same low-rank operator as
    the solvers.
    """
    quad = 0.5 * float(np.sum(modes * (lowrank.apply(modes) + alpha * modes)))
    lin = float(np.sum(modes * forcings))
    s = np.einsum("ij,ij->i", modes, modes)
    return const + cell_area * (quad - lin + beta * float(np.sum(np.sqrt(s + eps**2))))


def objective_exact(A, problem_data, snu: SnuOperator, basis: ForcingBasis, alpha, beta, nu, eps, cell_area):
    """Reduced objective evaluated with exact PDE solves.

    Uses ``1/2 ||A^{-1} u_0 - y~||^2 + 1/2 sum_i ||A^{-1} u_i - g_i||^2 +
    alpha/2 sum ||u_i||^2`` plus the reweighting integral; agrees with
    :func:`objective_reduced` when the eigenbasis is complete.
    """
    if basis.G is None:
        raise ValueError("forcing basis lacks the G companions")
    modes = snu.apply(basis.forcings())
    states = A.solve(modes)
    misfit = np.sum((states[:, 0] - problem_data) ** 2) + np.sum((states[:, 1:] - basis.G) ** 2)
    s = np.einsum("ij,ij->i", modes, modes)
    val = 0.5 * misfit + 0.5 * alpha * np.sum(s) + 0.5 * beta * np.sum(nu * s + eps**2 * nu + 1.0 / nu)
    return float(cell_area * val)


def irls_update(snu: SnuOperator, forcings, nu_k, eps_next, theta=1.0):
    """One (over-relaxed) reweighting step.

    Returns
    -------
    nu_next : ndarray
    G : ndarray
        Gradient at ``nu_k`` evaluated with ``eps_next``.
    s, modes : ndarray
        Second moment and modes at ``nu_k``.
    """
    G, s, modes = gradient(snu, forcings, nu_k, eps_next)
    nu_bar = 1.0 / np.sqrt(s + eps_next**2)
    if theta == 1.0:
        return nu_bar, G, s, modes
    floor = 1e-3 * eps_next / (1.0 + s.max())
    nu_next = np.maximum((1.0 - theta) * nu_k + theta * nu_bar, floor)
    return nu_next, G, s, modes


def hessvec(snu: SnuOperator, modes, nu, dnu, beta=None):
    """Hessian of the reduced gradient applied to ``dnu``."""
    beta = snu.beta if beta is None else beta
    dnu = np.asarray(dnu, dtype=float)
    out = 2.0 / nu**3 * dnu
    if beta and modes.shape[1]:
        inner = snu.apply(modes * dnu[:, None])
        out = out - 2.0 * beta * np.einsum("ij,ij->i", modes, inner)
    return out


def precond_diag(snu: SnuOperator, modes, nu, beta=None, floor=None, s=None):
    """Exact diagonal of the Hessian, mean mode included.

    Non-positive entries are replaced by the positive part ``2 / nu^3``.
    ``floor``, if given, additionally clamps every entry from below at
    ``floor * max(P)``; that destroys the scaling in regions where ``nu`` is
    of order ``1 / eps`` and is off by default.
    """
    beta = snu.beta if beta is None else beta
    if s is None:
        s = np.einsum("ij,ij->i", modes, modes)
    pos = 2.0 / nu**3
    P = pos - 2.0 * beta * snu.diag() * s
    bad = P <= 0
    if np.any(bad):
        P[bad] = pos[bad]
    if floor is not None:
        P = np.maximum(P, floor * np.max(P))
    return P


def pcg(hv, precond, rhs, n_cg, rel_tol=1e-2):
    """Truncated preconditioned CG with a negative-curvature exit.

    Parameters
    ----------
    hv : callable
        Hessian-vector product.
    precond : ndarray
        Positive diagonal preconditioner.

    Returns
    -------
    x : ndarray
    iters : int
    curvature_flag : bool
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return x, 0, False
    z = r / precond
    p = z.copy()
    rz = r @ z
    for it in range(1, n_cg + 1):
        Hp = hv(p)
        pHp = p @ Hp
        if pHp <= 0:
            if it == 1:
                x = z
            return x, it, True
        a = rz / pHp
        x += a * p
        r -= a * Hp
        if np.linalg.norm(r) <= rel_tol * bnorm:
            return x, it, False
        z = r / precond
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, n_cg, False


def cost_units(r, rtilde, n_cg=0, method="newton"):
    """Work of one iteration in units of one IRLS iteration."""
    if method in ("irls", "or-irls"):
        return 1.0
    return 2.0 * (r + rtilde + rtilde * n_cg) / (r + 2.0 * rtilde)


def _newton_extra_units(r, rtilde, n_cg):
    # Newton step minus the gradient evaluation it contains.
    return cost_units(r, rtilde, n_cg, "newton") - 1.0


def _finish(problem, config, nu, s, modes, record, converged, eps, method):
    return SolveResult(
        nu=nu,
        u_mean=modes[:, 0].copy(),
        modes=modes[:, 1:].copy(),
        second_moment=s,
        record=record,
        converged=converged,
        eps=eps,
        method=method,
    )


def _irls_phase(problem, config, nu, k0, n_steps, theta, tag, record, cost, nu0_given=True):
    """Run up to ``n_steps`` reweighting steps; return the loop state."""
    c = config
    for k in range(k0, k0 + n_steps):
        eps = c.eps_at(k + 1)
        snu = problem.snu(nu, c.alpha, c.beta)
        nu_next, G, s, modes = irls_update(snu, problem.forcings, nu, eps, theta)
        cost += 1.0
        gnorm = problem.norm(G)
        obj = objective_reduced(snu, problem.forcings, nu, eps, problem.cell_area, problem.const, modes)
        record.append(IterationRow(k, tag, eps, gnorm, obj, cost, 0))
        logger.debug("%s %4d  |G| = %.3e  J = %.10e", tag, k, gnorm, obj)
        if gnorm <= c.tol_grad:
            return nu, s, modes, k, cost, True
        nu = nu_next
    return nu, None, None, k0 + n_steps, cost, False


def irls_solve(problem: ReducedProblem, config: SolverConfig, nu0=None) -> SolveResult:
    """Reweighting iteration with optional over-relaxation ``config.theta``.

    The returned weight is the last iterate whose gradient was verified to
    be below ``tol_grad``; on non-convergence it is the final update.
    """
    c = config
    nu = np.ones(problem.N) if nu0 is None else np.asarray(nu0, dtype=float).copy()
    tag = "irls" if c.theta == 1.0 else "or-irls"
    record = ConvergenceRecord()
    nu, s, modes, k, cost, done = _irls_phase(problem, c, nu, 0, c.max_iter, c.theta, tag, record, 0.0)
    if not done:
        snu = problem.snu(nu, c.alpha, c.beta)
        s, modes = snu.second_moment(problem.forcings)
    return _finish(problem, c, nu, s, modes, record, done, c.eps_at(k + 1), tag)


def nirls_solve(problem: ReducedProblem, config: SolverConfig, nu0=None) -> SolveResult:
    """Over-relaxed reweighting warm start followed by damped Newton-CG."""
    c = config
    nu = np.ones(problem.N) if nu0 is None else np.asarray(nu0, dtype=float).copy()
    record = ConvergenceRecord()
    r, rt = problem.lowrank.r, problem.basis.rank
    nu, s, modes, k, cost, done = _irls_phase(
        problem, c, nu, 0, min(c.warmup_irls, c.max_iter), c.warmup_theta, "or-irls", record, 0.0
    )
    if done:
        return _finish(problem, c, nu, s, modes, record, True, c.eps_at(k + 1), "nirls")

    n_cg_used = 0
    while k < c.max_iter:
        eps = c.eps_at(k + 1)
        snu = problem.snu(nu, c.alpha, c.beta)
        G, s, modes = gradient(snu, problem.forcings, nu, eps)
        cost += 1.0
        gnorm = problem.norm(G)
        obj = objective_reduced(snu, problem.forcings, nu, eps, problem.cell_area, problem.const, modes)
        record.append(IterationRow(k, "newton", eps, gnorm, obj, cost, n_cg_used))
        logger.debug("newton %4d  |G| = %.3e  J = %.10e", k, gnorm, obj)
        if gnorm <= c.tol_grad:
            return _finish(problem, c, nu, s, modes, record, True, eps, "nirls")
        P = precond_diag(snu, modes, nu, floor=c.precond_floor, s=s)
        dnu, n_cg_used, flag = pcg(lambda v: hessvec(snu, modes, nu, v), P, -G, c.n_cg, c.cg_rtol)
        if flag:
            logger.debug("newton %4d: negative curvature after %d CG steps", k, n_cg_used)
        cost += _newton_extra_units(r, rt, n_cg_used)
        neg = dnu < 0
        step = 1.0
        if np.any(neg):
            step = min(1.0, float(np.min(-c.nu_damping * nu[neg] / dnu[neg])))
        nu = nu + step * dnu
        k += 1

    snu = problem.snu(nu, c.alpha, c.beta)
    s, modes = snu.second_moment(problem.forcings)
    return _finish(problem, c, nu, s, modes, record, False, c.eps_at(k), "nirls")


def optimality_residual(result: SolveResult, problem: ReducedProblem, config: SolverConfig, eps=None):
    """Gradient norm and normal-equation residual at ``result.nu``."""
    eps = result.eps if eps is None else eps
    snu = problem.snu(result.nu, config.alpha, config.beta)
    G, _, modes = gradient(snu, problem.forcings, result.nu, eps)
    res = snu.forward(modes) - problem.forcings
    denom = np.linalg.norm(problem.forcings, axis=0)
    ratios = np.linalg.norm(res, axis=0) / np.where(denom > 0, denom, 1.0)
    return {"grad_norm": problem.norm(G), "normal_eq_residual": float(np.max(ratios)) if ratios.size else 0.0}
