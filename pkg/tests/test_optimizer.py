import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedsparse.grid import inner_l2
from sharedsparse.lowrank import LowRankSym
from sharedsparse.optimizer import (
    ConvergenceRecord,
    IterationRow,
    ReducedProblem,
    SolverConfig,
    cost_units,
    gradient,
    hessvec,
    irls_solve,
    irls_update,
    nirls_solve,
    objective_control,
    objective_exact,
    objective_reduced,
    optimality_residual,
    pcg,
    precond_diag,
)
from sharedsparse.problems import ProblemSpec, build_problem, deterministic_reduce, offline_setup
from sharedsparse.reweighted import SnuOperator


@pytest.fixture(scope="module")
def mini81():
    P = build_problem(ProblemSpec("poisson-neumann", 8))
    lr, basis, red = offline_setup(P)
    return P, lr, basis, red


@pytest.fixture(scope="module")
def p81_16():
    P = build_problem(ProblemSpec("poisson-neumann", 16))
    lr, basis, red = offline_setup(P)
    return P, lr, basis, red


def cfg_for(P, **kw):
    return SolverConfig(alpha=P.spec.alpha, beta=P.spec.beta, **kw)


def interior_nu(red, P, steps=20):
    """A weight field after a few reweighting steps, away from both extremes."""
    res = irls_solve(red, cfg_for(P, eps=1e-3, max_iter=steps, tol_grad=0.0))
    return res.nu


# ---------------------------------------------------------------- gradient

def test_gradient_zero_basis(rng):
    N = 9
    lr = LowRankSym(np.zeros((N, 0)), np.zeros(0))
    eps = 1e-3
    nu = np.full(N, 1 / eps)
    snu = SnuOperator(lr, nu, 1e-5, 1e-3)
    G, s, _ = gradient(snu, np.zeros((N, 3)), nu, eps)
    assert np.allclose(G, 0, atol=1e-18)
    G1, _, _ = gradient(SnuOperator(lr, np.ones(N), 1e-5, 1e-3), np.zeros((N, 3)), np.ones(N), eps)
    np.testing.assert_allclose(G1, eps**2 - 1)


def _fd_errors(f, df_dir, ts):
    return [abs((f(t) - f(-t)) / (2 * t) - df_dir) for t in ts]


def test_gradient_central_difference(mini81, rng):
    P, lr, basis, red = mini81
    a, b, eps = P.spec.alpha, P.spec.beta, 1e-3
    nu = interior_nu(red, P)
    delta = nu * rng.uniform(-1, 1, nu.size)

    # the additive constant does not change the derivative and only adds cancellation
    def J(t):
        x = nu + t * delta
        return objective_reduced(SnuOperator(lr, x, a, b), red.forcings, x, eps, red.cell_area)

    G, _, _ = gradient(SnuOperator(lr, nu, a, b), red.forcings, nu, eps)
    exact = 0.5 * b * inner_l2(P.grid, G, delta)
    errs = np.array(_fd_errors(J, exact, [1e-3, 1e-4, 1e-5])) / abs(exact)
    assert errs.min() <= 1e-5
    # quadratic decay until rounding takes over
    assert errs[1] <= 0.05 * errs[0]
    assert errs[2] < errs[1]


# ---------------------------------------------------------------- objective

def test_objective_trivial_zero():
    N = 4
    lr = LowRankSym(np.zeros((N, 0)), np.zeros(0))
    nu = np.ones(N)
    snu = SnuOperator(lr, nu, 1e-5, 0.0)
    assert objective_reduced(snu, np.zeros((N, 1)), nu, 1e-3, 0.25) == 0.0


def test_objective_matches_definition(mini81, rng):
    P, lr, basis, red = mini81
    a, b, eps = P.spec.alpha, P.spec.beta, 1e-4
    nu = interior_nu(red, P)
    snu = SnuOperator(lr, nu, a, b)
    modes = snu.apply(red.forcings)
    s = np.sum(modes**2, axis=1)
    quad = objective_control(lr, red.forcings, modes, a, 0.0, eps, red.cell_area, red.const)
    reg = 0.5 * b * red.cell_area * np.sum(nu * s + eps**2 * nu + 1 / nu)
    assert objective_reduced(snu, red.forcings, nu, eps, red.cell_area, red.const) == pytest.approx(quad + reg, rel=1e-12)
    # minimizing over nu for the fixed control can only lower the value
    J_u = objective_control(lr, red.forcings, modes, a, b, eps, red.cell_area, red.const)
    assert J_u <= quad + reg + 1e-15


def test_objective_equals_sparse_objective_at_solution(p81_16):
    P, lr, basis, red = p81_16
    eps = 1e-4
    res = irls_solve(red, cfg_for(P, eps=eps, tol_grad=1e-10, max_iter=20000))
    assert res.converged
    snu = SnuOperator(lr, res.nu, P.spec.alpha, P.spec.beta)
    jt = objective_reduced(snu, red.forcings, res.nu, eps, red.cell_area, red.const)
    modes = snu.apply(red.forcings)
    ju = objective_control(lr, red.forcings, modes, P.spec.alpha, P.spec.beta, eps, red.cell_area, red.const)
    assert jt == pytest.approx(ju, rel=1e-9)


def test_objective_exact_full_rank_and_monte_carlo():
    P = build_problem(ProblemSpec("poisson-neumann", 8, rank=64, rank_forcing=8))
    lr, basis, red = offline_setup(P)
    a, b, eps = P.spec.alpha, P.spec.beta, 1e-3
    nu = interior_nu(red, P)
    snu = SnuOperator(lr, nu, a, b)
    tilde, _ = deterministic_reduce(P)
    h2 = P.grid.h**2
    jr = objective_reduced(snu, red.forcings, nu, eps, red.cell_area, red.const)
    assert objective_exact(P.A, tilde, snu, basis, a, b, nu, eps, h2) == pytest.approx(jr, rel=1e-8)

    # Monte Carlo over the parameter: u = u0 - sum u_i xi_i, m = m0 + C^{1/2} F xi
    rng = np.random.default_rng(0)
    modes = snu.apply(red.forcings)
    u0, U = modes[:, 0], modes[:, 1:]
    y0 = P.A.solve(u0 + P.f + P.B @ P.prior.mean) - P.y_d
    Y = -P.A.solve(U) + basis.G
    reg = 0.5 * b * h2 * np.sum(nu * np.sum(modes**2, 1) + eps**2 * nu + 1 / nu)
    vals = []
    for _ in range(10):
        xi = rng.standard_normal((basis.rank, 10_000))
        y = y0[:, None] + Y @ xi
        u = u0[:, None] - U @ xi
        vals.append(0.5 * h2 * np.sum(y**2, 0) + 0.5 * a * h2 * np.sum(u**2, 0))
    vals = np.concatenate(vals) + reg
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - jr) <= 3 * se


# ---------------------------------------------------------------- irls_update

def test_irls_update_zero_moment():
    N = 5
    lr = LowRankSym(np.zeros((N, 0)), np.zeros(0))
    nu = np.ones(N)
    nxt, *_ = irls_update(SnuOperator(lr, nu, 1e-5, 1e-3), np.zeros((N, 2)), nu, 1e-4)
    np.testing.assert_allclose(nxt, 1e4)


def test_irls_update_gradient_identity(mini81):
    P, lr, basis, red = mini81
    nu = np.ones(P.N)
    eps = 1e-5
    for _ in range(10):
        snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
        nxt, G, s, _ = irls_update(snu, red.forcings, nu, eps, 1.0)
        np.testing.assert_allclose(nxt, 1 / np.sqrt(s + eps**2), rtol=1e-15)
        ident = nxt**-2 - nu**-2
        assert np.max(np.abs(G - ident)) <= 1e-12 * np.max(np.abs(G))
        nu = nxt


def test_irls_update_overrelaxation_floor(mini81):
    P, lr, basis, red = mini81
    nu = np.full(P.N, 1e5)
    snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
    nxt, _, s, _ = irls_update(snu, red.forcings, nu, 1e-7, 1.9)
    assert np.all(nxt > 0)
    assert np.all(nxt >= 1e-3 * 1e-7 / (1 + s.max()) * (1 - 1e-15))


# ---------------------------------------------------------------- hessian

def test_hessvec_beta_zero(mini81, rng):
    P, lr, basis, red = mini81
    nu = rng.uniform(1, 10, P.N)
    snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
    modes = snu.apply(red.forcings)
    d = rng.standard_normal(P.N)
    np.testing.assert_allclose(hessvec(snu, modes, nu, d, beta=0.0), 2 / nu**3 * d)
    np.testing.assert_allclose(precond_diag(snu, modes, nu, beta=0.0), 2 / nu**3)


def test_hessvec_symmetric(mini81, rng):
    P, lr, basis, red = mini81
    nu = interior_nu(red, P)
    snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
    modes = snu.apply(red.forcings)
    for _ in range(5):
        d1, d2 = nu * rng.standard_normal((2, P.N))
        a = inner_l2(P.grid, hessvec(snu, modes, nu, d1), d2)
        b = inner_l2(P.grid, d1, hessvec(snu, modes, nu, d2))
        assert abs(a - b) <= 1e-10 * max(abs(a), abs(b))


def test_hessvec_central_difference(mini81, rng):
    P, lr, basis, red = mini81
    a, b, eps = P.spec.alpha, P.spec.beta, 1e-3
    nu = interior_nu(red, P)
    delta = nu * rng.uniform(-1, 1, nu.size)

    def G(t):
        x = nu + t * delta
        return gradient(SnuOperator(lr, x, a, b), red.forcings, x, eps)[0]

    snu = SnuOperator(lr, nu, a, b)
    exact = hessvec(snu, snu.apply(red.forcings), nu, delta)
    errs = np.array([np.linalg.norm((G(t) - G(-t)) / (2 * t) - exact) for t in (1e-3, 1e-4, 1e-5)])
    errs /= np.linalg.norm(exact)
    assert errs.min() <= 1e-5
    assert errs[1] <= 0.05 * errs[0] + 1e-9


def test_precond_is_hessian_diagonal(mini81, rng):
    P, lr, basis, red = mini81
    nu = interior_nu(red, P)
    snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
    modes = snu.apply(red.forcings)
    Pd = precond_diag(snu, modes, nu)
    raw = 2 / nu**3 - 2 * P.spec.beta * snu.diag() * np.sum(modes**2, 1)
    for j in rng.choice(P.N, 10, replace=False):
        e = np.zeros(P.N)
        e[j] = 1
        col = hessvec(snu, modes, nu, e)[j]
        assert raw[j] == pytest.approx(col, rel=1e-10)
        if raw[j] > 0:
            assert Pd[j] == pytest.approx(raw[j], rel=1e-14)
    assert np.all(Pd > 0)


def test_precond_positive_after_repair(mini81):
    P, lr, basis, red = mini81
    nu = np.full(P.N, 1e6)
    snu = SnuOperator(lr, nu, P.spec.alpha, P.spec.beta)
    modes = snu.apply(red.forcings * 1e3)
    Pd = precond_diag(snu, modes, nu)
    assert np.all(Pd > 0)
    floored = precond_diag(snu, modes, nu, floor=1e-12)
    assert np.all(floored >= 1e-12 * floored.max())


# ---------------------------------------------------------------- pcg

def test_pcg_identity(rng):
    b = rng.standard_normal(7)
    x, it, flag = pcg(lambda v: v, np.ones(7), b, 5)
    np.testing.assert_allclose(x, b)
    assert it == 1 and not flag


def test_pcg_exact_small_system(rng):
    M = rng.standard_normal((4, 4))
    H = M @ M.T + 4 * np.eye(4)
    b = rng.standard_normal(4)
    x, it, flag = pcg(lambda v: H @ v, np.diag(H).copy(), b, 10, rel_tol=1e-14)
    assert not flag
    assert np.linalg.norm(H @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_pcg_negative_curvature(rng):
    b = rng.standard_normal(5)
    Pd = rng.uniform(1, 3, 5)
    x, it, flag = pcg(lambda v: -v, Pd, b, 5)
    assert flag and it == 1
    np.testing.assert_allclose(x, b / Pd)


def test_pcg_zero_rhs():
    x, it, flag = pcg(lambda v: v, np.ones(3), np.zeros(3), 3)
    assert np.all(x == 0) and it == 0 and not flag


# ---------------------------------------------------------------- cost model

def test_cost_units_examples():
    assert round(cost_units(150, 16, 3), 2) == 2.35
    assert round(cost_units(150, 16, 8), 2) == 3.23
    assert cost_units(150, 16, 0) == pytest.approx(2 * 166 / 182)
    assert round(cost_units(150, 16, 0), 3) == 1.824
    assert cost_units(150, 16, 3, "irls") == 1.0


# ---------------------------------------------------------------- solvers

def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(alpha=0, beta=1)
    with pytest.raises(ValueError):
        SolverConfig(alpha=1, beta=1, theta=0.5)
    with pytest.raises(ValueError):
        SolverConfig(alpha=1, beta=1, n_cg=0)
    with pytest.raises(ValueError):
        SolverConfig(alpha=1, beta=1, eps_schedule=(1.5, 1e-8))
    c = SolverConfig(alpha=1, beta=1, eps=1e-2, eps_schedule=(0.5, 1e-4))
    assert c.eps_at(0) == 1e-2 and c.eps_at(1) == 5e-3 and c.eps_at(40) == 1e-4


def test_irls_zero_data_one_iteration():
    P = build_problem(ProblemSpec("helmholtz", 8, gamma=0.0, rank=20))
    lr, basis, red = offline_setup(P)
    res = irls_solve(red, cfg_for(P, eps=1e-7))
    assert res.converged and res.record.iterations == 1
    np.testing.assert_allclose(res.nu, 1e7)
    assert np.all(res.u_mean == 0)


def test_irls_monotone_and_summable(p81_16):
    P, lr, basis, red = p81_16
    res = irls_solve(red, cfg_for(P, eps=1e-7, max_iter=200, tol_grad=0.0))
    J = res.record.column("objective")
    assert np.all(np.diff(J) <= 1e-10)
    cost = res.record.column("cost_units")
    assert np.all(np.diff(cost) > 0)


def _mean_increments(P, lr, red, n_iter=200):
    a, b, eps = P.spec.alpha, P.spec.beta, 1e-7
    nu = np.ones(P.N)
    incs = []
    prev = None
    for _ in range(n_iter):
        snu = SnuOperator(lr, nu, a, b)
        nu, _, _, modes = irls_update(snu, red.forcings, nu, eps)
        if prev is not None:
            incs.append(inner_l2(P.grid, modes[:, 0] - prev, modes[:, 0] - prev))
        prev = modes[:, 0]
    return np.array(incs)


def test_irls_mean_control_increments_summable(p81_16):
    P, lr, basis, red = p81_16
    incs = _mean_increments(P, lr, red)
    assert np.isfinite(incs.sum())
    tail = incs[-50:]
    assert np.all(np.diff(tail) < 0)
    assert tail[-1] < 1e-9 * incs.sum()


@pytest.mark.xfail(strict=True, reason="increments decay about 2.5% per step; after 200 steps the "
                   "squared mean-control increment is ~7e-9 (sum ~109), independent of eps")
def test_irls_mean_control_increments_absolute_tail(p81_16):
    P, lr, basis, red = p81_16
    assert _mean_increments(P, lr, red)[-10:].max() < 1e-12


def test_irls_converges_fixed_eps(p81_16):
    P, lr, basis, red = p81_16
    res = irls_solve(red, cfg_for(P, eps=1e-4, tol_grad=1e-8, max_iter=5000))
    assert res.converged and res.record.rows[-1].grad_norm <= 1e-8


def test_eps_schedule_runs(p81_16):
    P, lr, basis, red = p81_16
    res = nirls_solve(red, cfg_for(P, eps=1e-2, eps_schedule=(0.7, 1e-7), max_iter=300))
    eps = res.record.column("epsilon")
    assert np.all(np.diff(eps) <= 0) and eps[-1] == pytest.approx(1e-7)
    assert res.converged


def test_nirls_matches_irls(p81_16):
    P, lr, basis, red = p81_16
    ri = irls_solve(red, cfg_for(P, eps=1e-7, tol_grad=1e-9, max_iter=20000))
    rn = nirls_solve(red, cfg_for(P, eps=1e-7, tol_grad=1e-9, n_cg=15))
    assert ri.converged and rn.converged
    diff = np.linalg.norm(rn.u_mean - ri.u_mean) / np.linalg.norm(ri.u_mean)
    assert diff <= 1e-6


def _newton_from(red, P, start_tol, n_cg, steps=4):
    nu = nirls_solve(red, cfg_for(P, eps=1e-7, tol_grad=start_tol, n_cg=15)).nu
    cfg = cfg_for(P, eps=1e-7, tol_grad=0.0, max_iter=steps, n_cg=n_cg, warmup_irls=0, cg_rtol=1e-12)
    return nirls_solve(red, cfg, nu0=nu).record.column("grad_norm")


def test_nirls_local_superlinear(p81_16):
    P, lr, basis, red = p81_16
    g15 = _newton_from(red, P, 1e-7, 15)
    gfull = _newton_from(red, P, 1e-7, P.N)
    ratios = g15[1:] / g15[:-1]
    assert np.all(np.diff(ratios) < 0) and ratios[-1] < 0.05
    np.testing.assert_allclose(g15, gfull, rtol=0.2)


@pytest.mark.xfail(strict=True, reason="at grad 1e-3 the weight must still grow toward 1/eps on the "
                   "zero set; exact Newton contracts by a fixed factor of about 0.67 there")
def test_nirls_superlinear_from_1e3(p81_16):
    P, lr, basis, red = p81_16
    g = _newton_from(red, P, 1e-3, 15)
    ratios = g[1:] / g[:-1]
    assert ratios[-1] < 0.5 * ratios[0]


def test_or_irls_faster_than_irls():
    P = build_problem(ProblemSpec("helmholtz", 64))
    lr, basis, red = offline_setup(P)
    plain = irls_solve(red, cfg_for(P, eps=1e-7, max_iter=3000))
    over = irls_solve(red, cfg_for(P, eps=1e-7, max_iter=3000, theta=1.5))
    assert plain.converged and over.converged
    assert over.record.rows[-1].cost_units < plain.record.rows[-1].cost_units


def test_optimality_residual(p81_16):
    P, lr, basis, red = p81_16
    cfg = cfg_for(P, eps=1e-7, tol_grad=1e-8)
    res = nirls_solve(red, cfg)
    out = optimality_residual(res, red, cfg)
    assert out["grad_norm"] <= 1e-7 and out["normal_eq_residual"] <= 1e-10
    res.nu = res.nu * 1.1
    bumped = optimality_residual(res, red, cfg)
    assert bumped["grad_norm"] > cfg.tol_grad
    assert bumped["normal_eq_residual"] <= 1e-10


def test_convergence_record_roundtrip(tmp_path):
    rec = ConvergenceRecord()
    rec.append(IterationRow(0, "or-irls", 1e-7, 0.1234567890123456789, -3.3e-4, 1.0, 0))
    rec.append(IterationRow(1, "newton", 1e-7, 1 / 3, np.pi, 3.3516483516483517, 3))
    path = tmp_path / "c.csv"
    rec.to_csv(path)
    assert path.read_text().splitlines()[0] == "iter,method,epsilon,grad_norm,objective,cost_units,n_cg"
    back = ConvergenceRecord.from_csv(path)
    assert back.rows == rec.rows


@settings(max_examples=20, deadline=None)
@given(r=st.integers(1, 400), rt=st.integers(1, 100), ncg=st.integers(0, 20))
def test_cost_units_properties(r, rt, ncg):
    c = cost_units(r, rt, ncg)
    assert c == pytest.approx(2 * r * (r + rt + rt * ncg) / (r * (r + 2 * rt)))
    assert cost_units(r, rt, ncg + 1) > c
