"""Uniform Dirichlet grids on the unit square/interval and the discrete -Laplacian.

Grid functions ("fields") are plain 1-D numpy arrays holding the interior
values in lexicographic order, first coordinate fastest.  Boundary values
are zero and never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import InvalidGrid, SampleError


@dataclass(frozen=True)
class GridSpec:
    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidGrid(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidGrid(f"n must be a positive integer, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def cell(self) -> float:
        """Quadrature weight h^dim of one node."""
        return self.h**self.dim

    def coords(self) -> tuple[np.ndarray, ...]:
        """Node coordinates, one flat array per axis, in storage order."""
        t = np.arange(1, self.n + 1) * self.h
        if self.dim == 1:
            return (t,)
        # x fastest: index k = i + n*j
        x = np.tile(t, self.n)
        y = np.repeat(t, self.n)
        return x, y

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def check(self, u: np.ndarray, name: str = "field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise ValueError(f"{name} has shape {u.shape}, grid needs ({self.size},)")
        return u


def make_grid(dim: int, n: int) -> GridSpec:
    return GridSpec(dim, n)


@lru_cache(maxsize=32)
def _neg_laplacian_matrix(grid: GridSpec) -> sp.csr_matrix:
    n = grid.n
    t = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    if grid.dim == 2:
        eye = sp.identity(n)
        t = sp.kron(eye, t) + sp.kron(t, eye)
    m = (t / grid.h**2).tocsr()
    m.sort_indices()
    return m


@dataclass(frozen=True)
class LinearOperator:
    """``scale * A_h + diag(diag)`` on the interior nodes of ``grid``."""

    grid: GridSpec
    scale: float = 1.0
    diag: np.ndarray | None = field(default=None, compare=False)

    @property
    def stencil(self) -> sp.csr_matrix:
        return _neg_laplacian_matrix(self.grid)

    def with_diag(self, d) -> "LinearOperator":
        d = self.grid.check(d, "diag").copy()
        if self.diag is not None:
            d = d + self.diag
        d.setflags(write=False)
        return LinearOperator(self.grid, self.scale, d)

    def scaled(self, s: float) -> "LinearOperator":
        return LinearOperator(self.grid, s, self.diag)

    def stencil_matvec(self, u: np.ndarray) -> np.ndarray:
        return self.stencil @ u

    def matvec(self, u: np.ndarray) -> np.ndarray:
        out = self.scale * (self.stencil @ u)
        if self.diag is not None:
            out += self.diag * u
        return out

    __matmul__ = matvec

    def diagonal(self) -> np.ndarray:
        d = self.scale * self.stencil.diagonal()
        if self.diag is not None:
            d = d + self.diag
        return d

    def tocsr(self) -> sp.csr_matrix:
        m = self.scale * self.stencil
        if self.diag is not None:
            m = m + sp.diags(self.diag)
        return m.tocsr()

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()

    def norm_estimate(self) -> float:
        """Cheap upper bound on the 2-norm (max absolute row sum)."""
        return float(abs(self.tocsr()).sum(axis=1).max())


def assemble_neg_laplacian(grid: GridSpec) -> LinearOperator:
    return LinearOperator(grid)


def sample(grid: GridSpec, fn) -> np.ndarray:
    """Evaluate ``fn(*coords)`` at the interior nodes.

    ``fn`` may be vectorized or scalar; constants are broadcast.
    """
    coords = grid.coords()
    try:
        vals = np.asarray(fn(*coords), dtype=float)
        vals = np.broadcast_to(vals, (grid.size,)).copy()
    except (TypeError, ValueError):
        vals = np.array([float(fn(*pt)) for pt in zip(*coords)])
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise SampleError(int(bad[0]), vals[bad[0]])
    return vals


def sup_norm(u: np.ndarray) -> float:
    u = np.asarray(u)
    return float(np.max(np.abs(u))) if u.size else 0.0


def l2_norm(u: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(grid.cell * np.dot(u, u)))


def dirichlet_energy(op: LinearOperator, u: np.ndarray) -> float:
    """h^d * u^T A_h u, the discrete counterpart of the integral of |grad u|^2."""
    return float(op.grid.cell * np.dot(u, op.stencil @ u))
