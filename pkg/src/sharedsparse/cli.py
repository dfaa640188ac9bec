"""Command-line driver: ``sharedsparse {setup,solve,online,deterministic,report}``.

Exit codes: 0 success, 1 usage error or missing artifact, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .io import RunConfig
from .lowrank import ForcingBasis, LowRankSym
from .optimizer import ConvergenceRecord, SolverConfig, irls_solve, nirls_solve
from .problems import (
    ProblemSpec,
    build_problem,
    deterministic_reduce,
    offline_setup,
    online_control,
    reduced_problem,
    shared_support,
    truncation_estimate,
)
from .reweighted import SnuOperator

logger = logging.getLogger("sharedsparse")

EXIT_OK, EXIT_USAGE, EXIT_NOCONV = 0, 1, 2

META_KEYS = ("eps", "alpha", "beta", "converged", "n", "r", "rtilde", "n_cg", "theta", "bound")


class CLIError(Exception):
    """Raised for usage problems and missing artifacts (exit code 1)."""


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override its entries")
    common.add_argument("--problem", choices=("poisson-neumann", "poisson-rhs", "helmholtz"))
    common.add_argument("--n", type=int)
    common.add_argument("--r", type=int)
    common.add_argument("--rtilde", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--kappa", type=float)
    common.add_argument("--eps", type=float)
    common.add_argument("--eps-schedule", metavar="RHO,EPS_MIN")
    common.add_argument("--method", choices=("irls", "or-irls", "nirls"))
    common.add_argument("--theta", type=float)
    common.add_argument("--cg-iters", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--warmup", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--setup-dir", help="directory holding lowrank.bin/basis.bin (default: out-dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sharedsparse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("setup", parents=[common], help="offline low-rank factors and truncation bound")
    sub.add_parser("solve", parents=[common], help="optimize the weight field")
    online = sub.add_parser("online", parents=[common], help="controls for parameter realizations")
    online.add_argument("--count", type=int, default=0, help="number of seeded prior draws")
    online.add_argument("--samples", help="CSV file, one parameter vector per row")
    online.add_argument("--tau", type=float, help="support threshold (default 1e-3 max|u|)")
    sub.add_parser("deterministic", parents=[common], help="write the reduced desired state")
    report = sub.add_parser("report", help="summarize solve runs")
    report.add_argument("--out-dir", default="out")
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CLIError(f"config file not found: {path}")
        values.update(io.parse_config_text(path.read_text()))
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            values[f.name] = val
    try:
        cfg = RunConfig.from_mapping(values)
        cfg.schedule()
    except ValueError as exc:
        raise CLIError(f"invalid configuration: {exc}") from exc
    return cfg


def _problem(cfg: RunConfig):
    spec = ProblemSpec(cfg.problem, cfg.n, alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
                       kappa=cfg.kappa, rank=cfg.r, rank_forcing=cfg.rtilde)
    return build_problem(spec)


def _solver_config(cfg: RunConfig, problem) -> SolverConfig:
    return SolverConfig(
        alpha=problem.spec.alpha,
        beta=problem.spec.beta,
        eps=cfg.eps,
        eps_schedule=cfg.schedule(),
        theta=1.0 if cfg.method == "irls" else cfg.theta,
        n_cg=cfg.cg_iters,
        tol_grad=cfg.tol,
        max_iter=cfg.max_iters,
        warmup_irls=cfg.warmup,
        warmup_theta=cfg.theta,
        seed=cfg.seed,
    )


def save_lowrank(path, lr: LowRankSym):
    io.write_arrays(path, {"U": lr.U, "lam": lr.lam, "residuals": lr.residuals,
                           "flags": [float(lr.rank_deficient), float(lr.n_products)]})


def load_lowrank(path) -> LowRankSym:
    d = io.read_arrays(path)
    return LowRankSym(d["U"], d["lam"], d["residuals"], bool(d["flags"][0]), int(d["flags"][1]))


def save_basis(path, b: ForcingBasis):
    io.write_arrays(path, {"e0": b.e0, "E": b.E, "F": b.F, "G": b.G,
                           "singular_values": b.singular_values, "flags": [float(b.rank_deficient)]})


def load_basis(path) -> ForcingBasis:
    d = io.read_arrays(path)
    return ForcingBasis(d["e0"], d["E"], d["F"], d["G"], d["singular_values"], bool(d["flags"][0]))


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_dir(cfg: RunConfig, args) -> Path:
    return Path(args.setup_dir) if getattr(args, "setup_dir", None) else Path(cfg.out_dir)


def cmd_setup(cfg: RunConfig, args=None) -> int:
    problem = _problem(cfg)
    out = _out(cfg)
    lowrank, basis, _ = offline_setup(problem, seed=cfg.seed)
    io.write_spectrum_csv(out / "spectrum.csv", lowrank.lam)
    save_lowrank(out / "lowrank.bin", lowrank)
    save_basis(out / "basis.bin", basis)
    est = truncation_estimate(problem, problem.spec.rank)
    lines = [
        f"bound = {est['bound']:.17g}",
        f"r = {est['r']}",
        f"r_effective = {lowrank.r}",
        f"tail = {est['tail']}",
        f"reduced_rank = {est['reduced_rank'] or lowrank.rank_deficient}",
        f"rtilde = {basis.rank}",
        f"residual_tol = {lowrank.residual_tol:.17g}",
    ]
    (out / "truncation.txt").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    print(f"setup: r={lowrank.r} rtilde={basis.rank} bound={est['bound']:.4e} -> {out}")
    return EXIT_OK


def _load_setup(cfg, args, problem):
    sdir = _setup_dir(cfg, args)
    lr_path, b_path = sdir / "lowrank.bin", sdir / "basis.bin"
    if lr_path.is_file() and b_path.is_file():
        lowrank, basis = load_lowrank(lr_path), load_basis(b_path)
        if lowrank.N != problem.N:
            raise CLIError(f"{lr_path} was built for N={lowrank.N}, problem has N={problem.N}")
        return lowrank, basis, reduced_problem(problem, lowrank, basis)
    return None


def cmd_solve(cfg: RunConfig, args=None) -> int:
    problem = _problem(cfg)
    out = _out(cfg)
    loaded = _load_setup(cfg, args, problem)
    if loaded is None:
        logger.info("no setup artifacts found; computing them inline")
        loaded = offline_setup(problem, seed=cfg.seed)
    lowrank, basis, reduced = loaded
    sc = _solver_config(cfg, problem)
    result = nirls_solve(reduced, sc) if cfg.method == "nirls" else irls_solve(reduced, sc)
    result.record.to_csv(out / "convergence.csv")
    g = problem.grid
    io.write_field_csv(out / "nu.csv", g, result.nu)
    io.write_field_csv(out / "umean.csv", g, result.u_mean)
    io.write_field_csv(out / "stddev.csv", g, np.sqrt(np.maximum(result.second_moment, 0.0)))
    bound = truncation_estimate(problem, lowrank.r)["bound"]
    meta = [result.eps, sc.alpha, sc.beta, float(result.converged), g.n, lowrank.r, basis.rank,
            sc.n_cg, sc.theta, bound]
    io.write_arrays(out / "result.bin", {"nu": result.nu, "meta": meta})
    (out / "config.txt").write_text(cfg.to_text())
    last = result.record.rows[-1]
    print(f"solve: method={cfg.method} converged={result.converged} iterations={result.record.iterations} "
          f"grad_norm={last.grad_norm:.3e} cost={last.cost_units:.2f}")
    return EXIT_OK if result.converged else EXIT_NOCONV


def _read_samples(path, dim) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"sample file not found: {p}")
    with open(p, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    arr = np.array(rows, dtype=float).reshape(len(rows), -1) if rows else np.zeros((0, dim))
    if arr.shape[1] != dim:
        raise CLIError(f"samples have {arr.shape[1]} columns, parameter dimension is {dim}")
    return arr


def cmd_online(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    res_path = out / "result.bin"
    if not res_path.is_file():
        raise CLIError(f"missing {res_path}; run 'solve' first")
    problem = _problem(cfg)
    loaded = _load_setup(cfg, args, problem)
    if loaded is None:
        raise CLIError(f"missing lowrank.bin/basis.bin in {_setup_dir(cfg, args)}; run 'setup' first")
    lowrank, basis, _ = loaded
    res = io.read_arrays(res_path)
    meta = dict(zip(META_KEYS, res["meta"]))
    nu = res["nu"]
    prior = problem.prior
    if args.samples:
        params = _read_samples(args.samples, prior.dim)
    else:
        if args.count < 0:
            raise CLIError("--count must be non-negative")
        params = np.array([prior.sample(seed=cfg.seed + k) for k in range(args.count)]).reshape(-1, prior.dim)
    m_hat = (params - prior.mean).T
    controls = online_control(nu, lowrank, basis, problem, m_hat, meta["alpha"], meta["beta"])
    for k in range(controls.shape[1]):
        io.write_field_csv(out / f"control_{k}.csv", problem.grid, controls[:, k])
    snu_s = _second_moment_from(nu, lowrank, basis, meta)
    report = shared_support(snu_s, controls, tau=args.tau)
    per_draw = [int(np.count_nonzero(~report["mask"] & (np.abs(controls[:, k]) > report["tau"])))
                for k in range(controls.shape[1])]
    lines = [
        f"draws = {controls.shape[1]}",
        f"tau = {report['tau']:.17g}",
        f"support_cells = {int(np.count_nonzero(report['mask']))}",
        f"violations = {report['violations']}",
        "per_draw = " + ",".join(str(v) for v in per_draw),
    ]
    (out / "support_report.txt").write_text("\n".join(lines) + "\n")
    print(f"online: {controls.shape[1]} controls, violations={report['violations']}")
    return EXIT_OK


def _second_moment_from(nu, lowrank, basis, meta):
    s, _ = SnuOperator(lowrank, nu, meta["alpha"], meta["beta"]).second_moment(basis.forcings())
    return s


def cmd_deterministic(cfg: RunConfig, args=None) -> int:
    problem = _problem(cfg)
    out = _out(cfg)
    tilde, _ = deterministic_reduce(problem)
    io.write_field_csv(out / "tilde_yd.csv", problem.grid, tilde)
    (out / "config.txt").write_text(cfg.to_text())
    print(f"deterministic: ||tilde_yd|| = {np.sqrt(problem.grid.h**2 * tilde @ tilde):.3e}")
    return EXIT_OK


def _method_label(record: ConvergenceRecord, meta) -> str:
    tags = {r.method for r in record.rows}
    if "newton" in tags:
        return f"nirls(n_cg={int(meta['n_cg'])})"
    if "or-irls" in tags:
        return f"or-irls(theta={meta['theta']:g})"
    return "irls"


def collect_runs(out_dir) -> list[dict]:
    root = Path(out_dir)
    if not root.is_dir():
        return []
    runs = []
    for conv in sorted([root / "convergence.csv", *root.glob("*/convergence.csv")]):
        if not conv.is_file():
            continue
        rec = ConvergenceRecord.from_csv(conv)
        if not rec.rows:
            continue
        res_path = conv.parent / "result.bin"
        meta = dict(zip(META_KEYS, io.read_arrays(res_path)["meta"])) if res_path.is_file() else {}
        meta.setdefault("n_cg", 0)
        meta.setdefault("theta", 1.0)
        last = rec.rows[-1]
        runs.append({
            "run": str(conv.parent.relative_to(root)) if conv.parent != root else ".",
            "method": _method_label(rec, meta),
            "iterations": rec.iterations,
            "cost_units": last.cost_units,
            "grad_norm": last.grad_norm,
            "bound": meta.get("bound", float("nan")),
            "converged": bool(meta.get("converged", 0.0)),
        })
    return runs


def cmd_report(out_dir) -> int:
    runs = collect_runs(out_dir)
    if not runs:
        print("no runs found")
        return EXIT_USAGE
    header = f"{'run':<16} {'method':<22} {'iterations':>10} {'cost':>10} {'grad_norm':>11} {'bound':>11}"
    print(header)
    print("-" * len(header))
    for r in runs:
        print(f"{r['run']:<16} {r['method']:<22} {r['iterations']:>10d} {r['cost_units']:>10.2f} "
              f"{r['grad_norm']:>11.3e} {r['bound']:>11.3e}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.out_dir)
        cfg = resolve_config(args)
        handler = {"setup": cmd_setup, "solve": cmd_solve, "online": cmd_online,
                   "deterministic": cmd_deterministic}[args.command]
        return handler(cfg, args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
