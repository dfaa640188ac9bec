"""Gaussian priors for the uncertain parameter.

Two covariance models are supported:

* ``boundary1d``: ``C0 = gamma * (-d^2/ds^2)^{-1}`` on the cells of one face,
  homogeneous Dirichlet at the two segment endpoints.
* ``domain2d``: ``C0 = gamma * (-Laplace)^{-2}`` over the whole square, with a
  Dirichlet right side and Neumann elsewhere.

Nodal parameter vectors discretize functions, so the Euclidean covariance of
the nodal vector is the covariance operator divided by the cell measure
(``h`` on a face, ``h^2`` in the domain). This keeps pointwise variances
mesh-independent.
"""

from __future__ import annotations

import numpy as np

from .grid import BoundarySpec, DiscreteOperator, Grid2D, laplacian_1d

__all__ = ["GaussianPrior", "boundary_prior", "domain_prior"]


class GaussianPrior:
    """Gaussian measure ``N(m0, C0)`` with an exact covariance square root.

    Use :func:`boundary_prior` or :func:`domain_prior` to construct.
    """

    def __init__(self, variant, mean, gamma, *, eig=None, operator=None, cell_measure=1.0):
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.variant = variant
        self.mean = np.asarray(mean, dtype=float)
        self.gamma = float(gamma)
        self.cell_measure = float(cell_measure)
        self._eig = eig
        self._op = operator
        if eig is not None and np.any(eig[0] <= 0):
            raise ValueError("boundary covariance eigenvalues must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _check(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] != self.dim:
            raise ValueError(f"coefficient vector has {xi.shape[0]} rows, prior dimension is {self.dim}")
        return xi

    def cov_sqrt_apply(self, xi: np.ndarray) -> np.ndarray:
        """Apply the symmetric square root of the nodal covariance.

        ``xi`` may be a vector or a ``dim x k`` block of coefficients.
        """
        xi = self._check(xi)
        scale = np.sqrt(self.gamma / self.cell_measure)
        if self.variant == "boundary1d":
            lam, V = self._eig
            w = V.T @ xi
            w = w / np.sqrt(lam).reshape((-1,) + (1,) * (w.ndim - 1))
            return scale * (V @ w)
        return scale * self._op.solve(xi)

    def sample(self, seed=None, size=None) -> np.ndarray:
        """Draw ``m0 + C^{1/2} xi``; ``size`` draws come back as columns."""
        rng = np.random.default_rng(seed)
        shape = (self.dim,) if size is None else (self.dim, size)
        xi = rng.standard_normal(shape)
        m = self.cov_sqrt_apply(xi)
        return m + (self.mean if size is None else self.mean[:, None])

    def trace(self) -> float:
        """Trace of the covariance operator, ``gamma * sum(1 / lambda_i)``."""
        if self.variant != "boundary1d":
            raise NotImplementedError("trace is only available for boundary1d priors")
        return self.gamma * float(np.sum(1.0 / self._eig[0]))

    def covariance_dense(self) -> np.ndarray:
        """Dense nodal covariance matrix (testing and small problems only)."""
        S = self.cov_sqrt_apply(np.eye(self.dim))
        return S @ S


def boundary_prior(n: int, gamma: float, mean=None, mass_scaled: bool = True) -> GaussianPrior:
    """Prior on the ``n`` face cells of a grid with ``n`` cells per side.

    With ``mass_scaled=False`` the nodal covariance is ``gamma * T^{-1}``
    without the division by the cell length.
    """
    h = 1.0 / n
    T = laplacian_1d(n, h, "dirichlet", "dirichlet")
    lam, V = np.linalg.eigh(T)
    mean = np.zeros(n) if mean is None else np.broadcast_to(np.asarray(mean, float), (n,)).copy()
    return GaussianPrior("boundary1d", mean, gamma, eig=(lam, V), cell_measure=h if mass_scaled else 1.0)


def domain_prior(grid: Grid2D, gamma: float, mean=None, mass_scaled: bool = True) -> GaussianPrior:
    """Prior over all cells: ``C0 = gamma * L^{-2}``, divided by the cell area when ``mass_scaled``."""
    bc = BoundarySpec(left="neumann", right="dirichlet", bottom="neumann", top="neumann")
    L = DiscreteOperator(grid, bc, kind="laplace")
    mean = np.zeros(grid.N) if mean is None else np.broadcast_to(np.asarray(mean, float), (grid.N,)).copy()
    return GaussianPrior("domain2d", mean, gamma, operator=L, cell_measure=grid.h**2 if mass_scaled else 1.0)
