"""Estimator-style facade over the offline/online pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .optimizer import SolverConfig, irls_solve, nirls_solve
from .problems import ProblemSpec, build_problem, offline_setup, online_control, shared_support

__all__ = ["SharedSparsityControl"]


class SharedSparsityControl(BaseEstimator):
    """Shared-sparsity stochastic control for one of the model problems.

    ``fit`` runs the offline phase: low-rank factors plus the weight
    optimization. ``predict`` maps parameter fluctuations ``m - m0`` to
    optimal controls without PDE solves.

    Parameters
    ----------
    problem : {"poisson-neumann", "poisson-rhs", "helmholtz"}
    n : int
        Cells per side.
    alpha, beta, gamma, kappa, rank, rank_forcing : optional
        ``None`` keeps the preset value.
    method : {"irls", "or-irls", "nirls"}
    eps : float
        Smoothing of the pointwise norm.
    theta : float
        Over-relaxation for ``or-irls`` and for the NIRLS warm start.
    n_cg : int
        Inner CG iterations per Newton step.
    tol : float
        Gradient-norm stopping tolerance.
    max_iter, warmup : int
    random_state : int
        Seed for the randomized offline steps.

    Attributes
    ----------
    nu_ : ndarray of shape (n_cells,)
        Optimized weight field.
    u_mean_ : ndarray of shape (n_cells,)
        Mean control.
    second_moment_ : ndarray of shape (n_cells,)
    support_ : ndarray of bool
        Cells where the root second moment exceeds ``1e-3`` of its maximum.
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, problem="poisson-neumann", n=32, alpha=None, beta=None, gamma=None,
                 kappa=None, rank=None, rank_forcing=None, method="nirls", eps=1e-7, theta=1.5,
                 n_cg=3, tol=1e-6, max_iter=500, warmup=15, random_state=0):
        self.problem = problem
        self.n = n
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.kappa = kappa
        self.rank = rank
        self.rank_forcing = rank_forcing
        self.method = method
        self.eps = eps
        self.theta = theta
        self.n_cg = n_cg
        self.tol = tol
        self.max_iter = max_iter
        self.warmup = warmup
        self.random_state = random_state

    def _solver_config(self):
        spec = self.problem_.spec
        return SolverConfig(alpha=spec.alpha, beta=spec.beta, eps=self.eps,
                            theta=1.0 if self.method == "irls" else self.theta,
                            n_cg=self.n_cg, tol_grad=self.tol, max_iter=self.max_iter,
                            warmup_irls=self.warmup, warmup_theta=self.theta)

    def fit(self, X=None, y=None):
        """Run the offline phase. ``X`` and ``y`` are ignored."""
        if self.method not in ("irls", "or-irls", "nirls"):
            raise ValueError(f"unknown method {self.method!r}")
        seed = int(check_random_state(self.random_state).randint(2**31 - 1)) \
            if not isinstance(self.random_state, (int, np.integer)) else int(self.random_state)
        spec = ProblemSpec(self.problem, self.n, alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           kappa=self.kappa, rank=self.rank, rank_forcing=self.rank_forcing)
        self.problem_ = build_problem(spec)
        self.lowrank_, self.basis_, self.reduced_ = offline_setup(self.problem_, seed=seed)
        cfg = self._solver_config()
        solve = nirls_solve if self.method == "nirls" else irls_solve
        self.result_ = solve(self.reduced_, cfg)
        self.nu_ = self.result_.nu
        self.u_mean_ = self.result_.u_mean
        self.second_moment_ = self.result_.second_moment
        rms = np.sqrt(np.maximum(self.second_moment_, 0.0))
        self.support_ = rms > 1e-3 * rms.max() if rms.max() > 0 else np.zeros_like(rms, dtype=bool)
        self.n_iter_ = self.result_.record.iterations
        self.converged_ = self.result_.converged
        self.n_features_in_ = self.problem_.prior.dim
        return self

    def predict(self, X):
        """Controls for parameter fluctuations.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_params)
            Rows are ``m - m0``.

        Returns
        -------
        ndarray of shape (n_samples, n_cells)
        """
        check_is_fitted(self, "nu_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        spec = self.problem_.spec
        U = online_control(self.nu_, self.lowrank_, self.basis_, self.problem_, X.T, spec.alpha, spec.beta)
        return U.T

    def sample_parameters(self, n_samples=1, random_state=None):
        """Prior fluctuations ``m - m0`` as rows."""
        check_is_fitted(self, "nu_")
        rng = check_random_state(random_state)
        prior = self.problem_.prior
        xi = rng.standard_normal((prior.dim, n_samples))
        return prior.cov_sqrt_apply(xi).T

    def support_violations(self, X, rel_tau=1e-3):
        """Count cells outside the shared support where a control exceeds the threshold."""
        controls = self.predict(X).T
        return shared_support(self.second_moment_, controls, rel_tau=rel_tau)["violations"]
