"""Low-rank factors used by the offline setup.

``eig_lowrank`` computes the dominant eigenpairs of the symmetric positive
semidefinite map ``K = A^{-T} A^{-1}`` from block products only.
``build_forcing_basis`` builds the rank-``rtilde`` factorization
``E F^T ~ K B C0^{1/2}`` together with the mean forcing ``e0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

__all__ = [
    "LowRankSym",
    "ForcingBasis",
    "eig_lowrank",
    "build_forcing_basis",
    "truncation_bound",
    "trace_ratio_estimate",
]


@dataclass
class LowRankSym:
    """Truncated eigendecomposition ``K ~ U diag(lam) U^T``.

    Attributes
    ----------
    U : ndarray of shape (N, r)
        Orthonormal eigenvector estimates.
    lam : ndarray of shape (r,)
        Positive eigenvalues in descending order.
    residuals : ndarray of shape (r,)
        ``||K u_i - lam_i u_i||_2`` for each retained pair.
    rank_deficient : bool
        Set when fewer than the requested number of eigenvalues were
        numerically nonzero.
    n_products : int
        Number of single-vector applications of ``K`` that were used.
    """

    U: np.ndarray
    lam: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rank_deficient: bool = False
    n_products: int = 0

    @property
    def r(self) -> int:
        return self.lam.shape[0]

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def residual_tol(self) -> float:
        if self.r == 0:
            return 0.0
        return float(np.max(self.residuals) / self.lam[0])

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``U diag(lam) U^T v``."""
        w = self.U.T @ v
        w = w * self.lam.reshape((-1,) + (1,) * (w.ndim - 1))
        return self.U @ w

    def truncated(self, r: int) -> "LowRankSym":
        r = min(r, self.r)
        return LowRankSym(self.U[:, :r], self.lam[:r], self.residuals[:r], self.rank_deficient, self.n_products)


@dataclass
class ForcingBasis:
    """Mean forcing ``e0`` and the modes of ``K B C0^{1/2}``.

    ``E[:, i] = A^{-1} G[:, i]`` and ``G[:, i] = A^{-1} B C0^{1/2} F[:, i]``,
    so ``E F^T`` is the projection of ``K B C0^{1/2}`` onto ``span(F)``.
    """

    e0: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    singular_values: np.ndarray
    rank_deficient: bool = False

    @property
    def rank(self) -> int:
        return self.E.shape[1]

    def forcings(self) -> np.ndarray:
        """Columns ``[e0, e1, ..., e_rtilde]``."""
        return np.column_stack([self.e0, self.E])


def _orth(Y):
    Q, _ = np.linalg.qr(Y)
    return Q


def _dense_from_products(apply, n_in, batch=256):
    cols = []
    for start in range(0, n_in, batch):
        stop = min(start + batch, n_in)
        X = np.zeros((n_in, stop - start))
        X[np.arange(start, stop), np.arange(stop - start)] = 1.0
        cols.append(apply(X))
    return np.hstack(cols)


def eig_lowrank(apply_K, N, r, oversample=10, seed=0, n_power=2, method="lanczos", drop_tol=1e-14):
    """Dominant eigenpairs of a symmetric PSD operator given by products.

    Parameters
    ----------
    apply_K : callable
        Maps an ``N x k`` block to ``K @ block``.
    N : int
        Operator dimension.
    r : int
        Requested rank.
    oversample : int
        Extra probe vectors ``d``.
    seed : int or None
        Seed for the Gaussian test matrix.
    n_power : int
        Subspace (power) iterations on top of the range finder. Each adds
        ``r + d`` products.
    method : {"lanczos", "randomized", "dense"}
        Lanczos (ARPACK) is the default since the spectrum of inverse
        elliptic operators decays slowly and a plain range finder needs
        many power iterations to resolve the trailing pairs. ``"dense"`` is
        used automatically when ``r + d >= N``.

    Returns
    -------
    LowRankSym
    """
    if r < 0 or r > N:
        raise ValueError(f"rank {r} outside [0, {N}]")
    if r == 0:
        return LowRankSym(np.zeros((N, 0)), np.zeros(0))
    ell = r + oversample
    if ell >= N:
        method = "dense"

    if method == "dense":
        K = _dense_from_products(apply_K, N)
        K = 0.5 * (K + K.T)
        lam, V = np.linalg.eigh(K)
        order = np.argsort(lam)[::-1][:r]
        lam, U = lam[order], V[:, order]
        Z = K @ U
        products = N
    elif method == "lanczos":
        counter = [0]

        def mv(x):
            counter[0] += 1 if x.ndim == 1 else x.shape[1]
            return apply_K(x)

        op = spla.LinearOperator((N, N), matvec=mv, matmat=mv, dtype=float)
        rng = np.random.default_rng(seed)
        lam, U = spla.eigsh(op, k=r, which="LA", v0=rng.standard_normal(N), ncv=min(N, max(2 * r + 1, ell)))
        order = np.argsort(lam)[::-1]
        lam, U = lam[order], U[:, order]
        Z = apply_K(U)
        products = counter[0] + r
    elif method == "randomized":
        rng = np.random.default_rng(seed)
        Y = apply_K(rng.standard_normal((N, ell)))
        for _ in range(n_power):
            Y = apply_K(_orth(Y))
        Q = _orth(Y)
        KQ = apply_K(Q)
        T = Q.T @ KQ
        lam, W = np.linalg.eigh(0.5 * (T + T.T))
        order = np.argsort(lam)[::-1][:r]
        lam, W = lam[order], W[:, order]
        U = Q @ W
        Z = KQ @ W
        products = ell * (n_power + 2)
    else:
        raise ValueError(f"unknown method {method!r}")

    keep = lam > drop_tol * max(lam[0], 0.0) if lam[0] > 0 else np.zeros(lam.shape, bool)
    deficient = bool(np.count_nonzero(keep) < r)
    if deficient:
        logger.warning("eig_lowrank: only %d of %d eigenvalues are numerically nonzero", keep.sum(), r)
    lam, U, Z = lam[keep], U[:, keep], Z[:, keep]
    residuals = np.linalg.norm(Z - U * lam, axis=0)
    return LowRankSym(U, lam, residuals, deficient, products)


def build_forcing_basis(A, B, prior, y_d, f, rank, seed=0, oversample=10, n_power=1, drop_tol=1e-14):
    """Offline factorization of the random forcing.

    Parameters
    ----------
    A : DiscreteOperator
    B : sparse matrix of shape (N, p)
        Injection of the parameter into the state equation.
    prior : GaussianPrior
    y_d, f : ndarray of shape (N,)
    rank : int
        Target rank ``rtilde``; clipped to the parameter dimension.

    Returns
    -------
    ForcingBasis
    """
    p = prior.dim
    if B.shape[1] != p:
        raise ValueError(f"injection has {B.shape[1]} columns, prior dimension is {p}")
    e0 = A.solve(y_d - A.solve(f + B @ prior.mean))

    def fwd(xi):
        return A.solve_normal(B @ prior.cov_sqrt_apply(xi))

    def adj(z):
        return prior.cov_sqrt_apply(B.T @ A.solve_normal(z))

    rank = min(rank, p)
    ell = rank + oversample
    if rank == 0:
        empty = np.zeros((A.N, 0))
        return ForcingBasis(e0, empty, np.zeros((p, 0)), empty, np.zeros(0))
    if ell >= p:
        M = fwd(np.eye(p))
        _, s, Vt = np.linalg.svd(M, full_matrices=False)
    else:
        rng = np.random.default_rng(seed)
        Y = fwd(rng.standard_normal((p, ell)))
        for _ in range(n_power):
            Y = fwd(_orth(adj(_orth(Y))))
        Q = _orth(Y)
        _, s, Vt = np.linalg.svd(adj(Q).T, full_matrices=False)
    s, F = s[:rank], Vt[:rank].T
    keep = s > drop_tol * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, bool)
    deficient = bool(np.count_nonzero(keep) < rank)
    s, F = s[keep], F[:, keep]
    G = A.solve(B @ prior.cov_sqrt_apply(F))
    E = A.solve(G)
    return ForcingBasis(e0, E, F, G, s, deficient)


def truncation_bound(lam, alpha, r):
    """Upper bound on ``Tr(R) / Tr(S_nu)`` after keeping ``r`` eigenvalues.

    ``lam`` holds the leading eigenvalues in descending order; both sums are
    truncated at ``len(lam)``.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        raise ValueError("empty eigenvalue list")
    if r > lam.size or r < 0:
        raise ValueError(f"r={r} outside [0, {lam.size}]")
    w = lam / (lam + alpha)
    return float(np.sum(w[r:]) / np.sum(w))


def trace_ratio_estimate(apply_K, snu, probes=30, seed=0, rtol=1e-10, return_stderr=False):
    """Hutchinson estimate of ``Tr(S_nu_r - S_nu) / Tr(S_nu)``.

    Dropping positive-semidefinite modes from ``K`` can only enlarge the
    inverse, so the ratio is non-negative.

    ``S_nu = (K + D_nu)^{-1}`` is applied with conjugate gradients using
    exact ``K`` products; the truncated operator ``snu`` serves as the
    preconditioner.
    """
    N = snu.N
    d = snu.d
    op = spla.LinearOperator((N, N), matvec=lambda x: apply_K(x) + d * x, dtype=float)
    prec = spla.LinearOperator((N, N), matvec=snu.apply, dtype=float)
    rng = np.random.default_rng(seed)
    num = np.empty(probes)
    den = np.empty(probes)
    for k in range(probes):
        z = rng.choice([-1.0, 1.0], size=N)
        x_r = snu.apply(z)
        x, info = spla.cg(op, z, x0=x_r, rtol=rtol, atol=0.0, maxiter=10 * N, M=prec)
        if info != 0:
            raise RuntimeError(f"CG did not converge for probe {k} (info={info})")
        num[k] = z @ (x_r - x)
        den[k] = z @ x
    est = num.mean() / den.mean()
    if return_stderr:
        stderr = num.std(ddof=1) / np.sqrt(probes) / den.mean() if probes > 1 else np.inf
        return float(est), float(stderr)
    return float(est)
