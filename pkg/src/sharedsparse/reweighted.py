"""The reweighted solve operator ``S = (D_nu + U diag(lam) U^T)^{-1}``.

``D_nu = alpha + beta * nu`` is diagonal, so the Sherman-Morrison-Woodbury
identity reduces every application to two thin products with ``U`` and one
``r x r`` Cholesky solve.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .lowrank import LowRankSym

__all__ = ["SnuOperator", "snu_build", "snu_apply", "snu_diag", "second_moment"]


def _col(a, ndim):
    return a.reshape((-1,) + (1,) * (ndim - 1))


class SnuOperator:
    """Factorized ``S_{nu,r}`` for one weight field.

    Parameters
    ----------
    lowrank : LowRankSym
    nu : ndarray of shape (N,)
        Strictly positive weights.
    alpha : float
        Positive L2 control cost.
    beta : float
        Non-negative sparsity weight.
    """

    def __init__(self, lowrank: LowRankSym, nu, alpha: float, beta: float):
        nu = np.asarray(nu, dtype=float)
        if nu.shape != (lowrank.N,):
            raise ValueError(f"nu has shape {nu.shape}, expected ({lowrank.N},)")
        if not np.all(nu > 0):
            raise ValueError("weight field must be strictly positive")
        if alpha <= 0 or beta < 0:
            raise ValueError("need alpha > 0 and beta >= 0")
        self.lowrank = lowrank
        self.nu = nu
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.d = self.alpha + self.beta * nu
        self.dinv = 1.0 / self.d
        U = lowrank.U
        if lowrank.r:
            core = np.diag(1.0 / lowrank.lam) + U.T @ (U * self.dinv[:, None])
            self._chol = sla.cho_factor(core, lower=False)
        else:
            self._chol = None

    @property
    def N(self) -> int:
        return self.d.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Apply ``S`` to a vector or to the columns of an ``N x k`` block."""
        v = np.asarray(v, dtype=float)
        dinv = _col(self.dinv, v.ndim)
        w = dinv * v
        if self._chol is None:
            return w
        U = self.lowrank.U
        return w - dinv * (U @ sla.cho_solve(self._chol, U.T @ w))

    __call__ = apply

    def diag(self) -> np.ndarray:
        """Exact diagonal of ``S`` in ``O(r^2 N)``."""
        if self._chol is None:
            return self.dinv.copy()
        U = self.lowrank.U
        W = sla.cho_solve(self._chol, U.T).T  # U @ core^{-1}
        return self.dinv - self.dinv**2 * np.einsum("ij,ij->i", U, W)

    def forward(self, u: np.ndarray) -> np.ndarray:
        """``(D_nu + U diag(lam) U^T) u``, the inverse of :meth:`apply`."""
        u = np.asarray(u, dtype=float)
        return _col(self.d, u.ndim) * u + self.lowrank.apply(u)

    def second_moment(self, forcings: np.ndarray):
        """Pointwise ``sum_i (S e_i)^2`` and the mode columns ``S e_i``.

        ``forcings`` is the ``N x (rtilde + 1)`` block ``[e0, e1, ...]``.
        """
        modes = self.apply(forcings)
        return np.einsum("ij,ij->i", modes, modes), modes


def snu_build(lowrank, nu, alpha, beta) -> SnuOperator:
    return SnuOperator(lowrank, nu, alpha, beta)


def snu_apply(op: SnuOperator, v):
    return op.apply(v)


def snu_diag(op: SnuOperator):
    return op.diag()


def second_moment(op: SnuOperator, basis):
    """``(s, modes)`` for a :class:`~sharedsparse.lowrank.ForcingBasis`."""
    return op.second_moment(basis.forcings())
