"""Cell-centered finite differences on the unit square.

Unknowns live at cell centers ``((i + 1/2) h, (j + 1/2) h)`` and are stored
row-major, ``index = j * n + i`` with ``i`` the x-index. Boundary faces are
handled with ghost cells: a Dirichlet face uses ghost ``-u_center`` and a
Neumann face uses ghost ``u_center`` (plus ``h * g`` for inhomogeneous data,
which moves to the right-hand side as ``g / h``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid2D",
    "BoundarySpec",
    "DiscreteOperator",
    "OperatorSingularError",
    "assemble",
    "solve",
    "boundary_injection",
    "inner_l2",
    "laplacian_1d",
]

SIDES = ("left", "right", "bottom", "top")
_CONDITIONS = ("dirichlet", "neumann")


class OperatorSingularError(ValueError):
    """Raised when an assembled operator is (numerically) singular."""


@dataclass(frozen=True)
class Grid2D:
    """Uniform ``n x n`` cell-centered grid on ``(0, 1)^2``."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs n >= 2 cells per side, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def N(self) -> int:
        return self.n * self.n

    @cached_property
    def x1d(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return flattened ``(x, y)`` coordinates in storage order."""
        x, y = np.meshgrid(self.x1d, self.x1d, indexing="xy")
        return x.ravel(), y.ravel()

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="xy")
        return i.ravel(), j.ravel()


@dataclass(frozen=True)
class BoundarySpec:
    """One homogeneous condition per side of the square."""

    left: str = "dirichlet"
    right: str = "dirichlet"
    bottom: str = "dirichlet"
    top: str = "dirichlet"

    def __post_init__(self):
        for side in SIDES:
            if getattr(self, side) not in _CONDITIONS:
                raise ValueError(f"{side}: unknown condition {getattr(self, side)!r}")

    @classmethod
    def all_dirichlet(cls) -> "BoundarySpec":
        return cls()

    @classmethod
    def left_neumann(cls) -> "BoundarySpec":
        return cls(left="neumann")

    @property
    def neumann_sides(self) -> list[str]:
        return [s for s in SIDES if getattr(self, s) == "neumann"]


def laplacian_1d(n: int, h: float, low: str, high: str) -> np.ndarray:
    """Dense cell-centered ``-d^2/dx^2`` on ``n`` cells with end conditions."""
    T = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    T[0, 0] += 1.0 if low == "dirichlet" else -1.0
    T[-1, -1] += 1.0 if high == "dirichlet" else -1.0
    return T / h**2


class DiscreteOperator:
    """Assembled five-point operator ``-Laplace - kappa^2`` with a sparse LU.

    Parameters
    ----------
    grid : Grid2D
    bc : BoundarySpec
    kind : {"laplace", "helmholtz"}
    kappa : float
        Wave number, only used for ``kind="helmholtz"``.

    Attributes
    ----------
    matrix : scipy.sparse.csc_matrix
        The symmetric ``N x N`` system matrix.
    """

    def __init__(self, grid: Grid2D, bc: BoundarySpec, kind: str = "laplace", kappa: float = 0.0):
        if kind not in ("laplace", "helmholtz"):
            raise ValueError(f"unknown operator kind {kind!r}")
        if kappa < 0:
            raise ValueError("kappa must be non-negative")
        self.grid = grid
        self.bc = bc
        self.kind = kind
        self.kappa = float(kappa) if kind == "helmholtz" else 0.0

        n, h = grid.n, grid.h
        self._tx = laplacian_1d(n, h, bc.left, bc.right)
        self._ty = laplacian_1d(n, h, bc.bottom, bc.top)
        eye = sp.identity(n, format="csr")
        A = sp.kron(eye, sp.csr_matrix(self._tx)) + sp.kron(sp.csr_matrix(self._ty), eye)
        if self.kappa:
            A = A - self.kappa**2 * sp.identity(grid.N)
        self.matrix = sp.csc_matrix(A)

        spectrum = self.spectrum()
        smallest = np.min(np.abs(spectrum))
        if smallest <= 1e-10 * np.max(np.abs(spectrum)):
            raise OperatorSingularError(
                f"operator singular: smallest |eigenvalue| {smallest:.3e} "
                f"(kappa^2 = {self.kappa**2:g})"
            )
        self._lu = spla.splu(self.matrix)

    @property
    def N(self) -> int:
        return self.grid.N

    def __matmul__(self, x):
        return self.matrix @ x

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Exact solve; ``rhs`` may be a vector or an ``N x k`` block."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.N:
            raise ValueError(f"rhs has {rhs.shape[0]} rows, operator has {self.N}")
        if rhs.size == 0:
            return np.zeros_like(rhs)
        return self._lu.solve(np.ascontiguousarray(rhs) if rhs.ndim == 1 else np.asfortranarray(rhs))

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``A^{-T} A^{-1}`` (two solves; ``A`` is symmetric)."""
        return self.solve(self.solve(rhs))

    def eig1d(self):
        """Eigenpairs of the x- and y-factors of the separable operator."""
        lx, vx = np.linalg.eigh(self._tx)
        ly, vy = np.linalg.eigh(self._ty)
        return (lx, vx), (ly, vy)

    def spectrum(self) -> np.ndarray:
        """All ``N`` eigenvalues, from the Kronecker structure (unsorted)."""
        lx = np.linalg.eigvalsh(self._tx)
        ly = np.linalg.eigvalsh(self._ty)
        return (ly[:, None] + lx[None, :]).ravel() - self.kappa**2


def assemble(grid: Grid2D, bc: BoundarySpec, kind: str = "laplace", kappa: float = 0.0) -> DiscreteOperator:
    return DiscreteOperator(grid, bc, kind=kind, kappa=kappa)


def solve(op: DiscreteOperator, rhs: np.ndarray) -> np.ndarray:
    return op.solve(rhs)


def boundary_cells(grid: Grid2D, side: str) -> np.ndarray:
    """Storage indices of the cells touching ``side``, in increasing order."""
    n = grid.n
    k = np.arange(n)
    return {
        "left": k * n,
        "right": k * n + n - 1,
        "bottom": k,
        "top": (n - 1) * n + k,
    }[side]


def injection_matrix(grid: Grid2D, bc: BoundarySpec, side: str | None = None) -> sp.csr_matrix:
    """Sparse ``N x n`` map taking face data ``m`` to the source ``m / h``."""
    sides = bc.neumann_sides
    if not sides:
        raise ValueError("boundary injection needs a Neumann side")
    side = side or sides[0]
    if side not in sides:
        raise ValueError(f"side {side!r} is not a Neumann side")
    rows = boundary_cells(grid, side)
    cols = np.arange(grid.n)
    return sp.csr_matrix((np.full(grid.n, 1.0 / grid.h), (rows, cols)), shape=(grid.N, grid.n))


def boundary_injection(grid: Grid2D, bc: BoundarySpec, m: np.ndarray, side: str | None = None) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[0] != grid.n:
        raise ValueError(f"boundary data has length {m.shape[0]}, expected {grid.n}")
    return injection_matrix(grid, bc, side) @ m


def inner_l2(grid: Grid2D, a: np.ndarray, b: np.ndarray) -> float:
    """Discrete ``L^2(D)`` inner product ``h^2 * sum(a * b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return grid.h**2 * float(np.dot(a.ravel(), b.ravel()))


def norm_l2(grid: Grid2D, a: np.ndarray) -> float:
    return float(np.sqrt(inner_l2(grid, a, a)))
