"""Reference solvers used to cross-check the penalized iteration.

* ``psor_solve``: projected SOR for the discrete bilateral obstacle problem
  ``phi <= y <= psi``, ``A y - f`` complementary to the constraints.
* ``active_set_enumerate``: brute force over every lower/upper/free pattern
  for tiny grids.
* ``fd_gradient_check``: adjoint directional derivative of the tracking cost
  with respect to the lower obstacle against central differences.

Complementarity is measured in diagonally scaled units, ``(A y - f)_i / a_ii``,
so tolerances are comparable to changes in ``y``.
"""

from __future__ import annotations

import numba
import numpy as np
from scipy.sparse.linalg import spsolve

from .errors import InfeasibleObstacles, MaxIterExceeded, TooLarge
from .grid import LinearOperator
from .penalty import beta_prime
from .solver import ProblemData, SolverConfig, adjoint_solve, converge_state, tracking_cost

ENUMERATE_MAX_NODES = 12


@numba.njit(cache=True)
def _psor_sweeps(indptr, indices, data, diag, f, lo, hi, y, relax, sweeps):
    n = y.size
    change = 0.0
    for _ in range(sweeps):
        change = 0.0
        for i in range(n):
            s = f[i]
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j != i:
                    s -= data[k] * y[j]
            new = y[i] + relax * (s / diag[i] - y[i])
            if new < lo[i]:
                new = lo[i]
            elif new > hi[i]:
                new = hi[i]
            d = abs(new - y[i])
            if d > change:
                change = d
            y[i] = new
    return change


def _check_obstacles(phi, psi):
    bad = np.flatnonzero(phi > psi)
    if bad.size:
        i = int(bad[0])
        raise InfeasibleObstacles(f"phi > psi at node {i} ({phi[i]:.6g} > {psi[i]:.6g})")


def natural_residual(A: LinearOperator, f, phi, psi, y) -> np.ndarray:
    """``y - clip(y - (A y - f)/diag(A), phi, psi)``; zero exactly at the VI solution."""
    return y - np.clip(y - (A @ y - f) / A.diagonal(), phi, psi)


def complementarity_violation(A: LinearOperator, f, phi, psi, y, tol) -> float:
    """Largest violation of the discrete complementarity conditions (scaled units).

    Nodes within ``tol`` of an obstacle count as touching it.
    """
    g = (A @ y - f) / A.diagonal()
    feas = max(0.0, np.max(phi - y), np.max(y - psi))
    at_lo = y - phi <= tol
    at_hi = psi - y <= tol
    free = ~(at_lo | at_hi)
    viol = np.zeros_like(g)
    viol[free] = np.abs(g[free])
    only_lo = at_lo & ~at_hi
    only_hi = at_hi & ~at_lo
    viol[only_lo] = np.maximum(0.0, -g[only_lo])
    viol[only_hi] = np.maximum(0.0, g[only_hi])
    return float(max(feas, viol.max(initial=0.0)))


def psor_solve(A: LinearOperator, f, phi, psi, relax: float = 1.5, tol: float = 1e-10,
               max_iter: int | None = None, y0=None, polish: bool = True) -> np.ndarray:
    """Projected SOR for ``phi <= y <= psi`` with ``A y - f`` complementary.

    Sweeps until the scaled natural residual is below ``tol``.  With
    ``polish`` the contact set found by the sweeps is frozen and the free
    nodes are solved exactly; the polished vector is kept only if it still
    satisfies the complementarity conditions to ``tol``.
    """
    grid = A.grid
    f, phi, psi = (grid.check(v, name).copy() for v, name in ((f, "f"), (phi, "phi"), (psi, "psi")))
    _check_obstacles(phi, psi)
    if not 0 < relax < 2:
        raise ValueError(f"relax must lie in (0, 2), got {relax}")
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ValueError("PSOR needs a positive diagonal")
    if max_iter is None:
        max_iter = 100_000 * grid.size

    m = A.tocsr()
    m.sort_indices()
    y = np.clip(grid.zeros() if y0 is None else np.array(y0, dtype=float), phi, psi)
    done = 0
    chunk = 50
    while done < max_iter:
        k = min(chunk, max_iter - done)
        _psor_sweeps(m.indptr, m.indices, m.data, diag, f, phi, psi, y, relax, k)
        done += k
        if np.max(np.abs(natural_residual(A, f, phi, psi, y))) <= tol:
            return _polish(A, f, phi, psi, y, tol) if polish else y
    raise MaxIterExceeded(f"PSOR did not reach tol={tol:g} in {max_iter} sweeps")


def _polish(A, f, phi, psi, y, tol):
    lo = y - phi <= tol
    hi = (psi - y <= tol) & ~lo
    free = ~(lo | hi)
    z = np.where(lo, phi, np.where(hi, psi, y))
    if free.any():
        m = A.tocsr()
        rhs = f[free] - m[free][:, ~free] @ z[~free]
        z[free] = spsolve(m[free][:, free].tocsc(), rhs)
    if np.all(np.isfinite(z)) and complementarity_violation(A, f, phi, psi, z, tol) <= tol:
        return z
    return y


def active_set_enumerate(A: LinearOperator, f, phi, psi, tol: float = 1e-10) -> np.ndarray:
    """Exact discrete VI solution by trying every activity pattern.

    Patterns sharing one free set are solved together (one factorization,
    one right-hand side per lower/upper assignment of the fixed nodes).
    """
    grid = A.grid
    m = grid.size
    if m > ENUMERATE_MAX_NODES:
        raise TooLarge(f"{m} nodes; enumeration is limited to {ENUMERATE_MAX_NODES}")
    f, phi, psi = (grid.check(v, name) for v, name in ((f, "f"), (phi, "phi"), (psi, "psi")))
    _check_obstacles(phi, psi)
    M = A.toarray()
    d = np.diag(M)
    bits = (np.arange(1 << m)[:, None] >> np.arange(m)[None, :]) & 1
    found = []
    for free in bits.astype(bool):
        fixed = np.flatnonzero(~free)
        k = fixed.size
        # column c: fixed node fixed[b] sits on psi iff bit b of c is set
        on_hi = bits[: 1 << k, :k].T.astype(bool)
        Y = np.empty((m, 1 << k))
        Y[fixed] = np.where(on_hi, psi[fixed, None], phi[fixed, None])
        if free.any():
            rhs = f[free, None] - M[np.ix_(free, ~free)] @ Y[~free]
            try:
                Y[free] = np.linalg.solve(M[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
            ok = np.all((Y[free] >= phi[free, None] - tol) & (Y[free] <= psi[free, None] + tol), axis=0)
            Y, on_hi = Y[:, ok], on_hi[:, ok]
        if k:
            G = (M[fixed] @ Y - f[fixed, None]) / d[fixed, None]
            ok = np.all(np.where(on_hi, G <= tol, G >= -tol), axis=0)
            Y = Y[:, ok]
        found.extend(Y.T)
    if not found:
        raise RuntimeError("no activity pattern satisfies the complementarity conditions")
    y = found[0]
    for other in found[1:]:
        if np.max(np.abs(other - y)) > 1e3 * tol * max(1.0, np.max(np.abs(y))):
            raise RuntimeError("activity patterns give distinct solutions")
    return y


def fd_gradient_check(cfg: SolverConfig, prob: ProblemData, phi, psi, direction, step: float = 1e-5):
    """Compare the adjoint derivative of phi -> 1/2 ||y(phi, psi) - z||^2 with central differences.

    Returns ``(adjoint_value, fd_value, rel_err)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    grid = prob.grid
    v = grid.check(direction, "direction")
    y, _ = converge_state(cfg.delta, prob, phi, psi)
    p = adjoint_solve(SolverConfig(cfg.delta, lin_tol=1e-13), prob, y, phi, psi)
    adjoint_value = grid.cell * float(np.dot(beta_prime(cfg.delta, y - phi) * p, v))

    y_plus, _ = converge_state(cfg.delta, prob, phi + step * v, psi, y0=y)
    y_minus, _ = converge_state(cfg.delta, prob, phi - step * v, psi, y0=y)
    fd_value = (tracking_cost(prob, y_plus) - tracking_cost(prob, y_minus)) / (2 * step)

    denom = max(abs(adjoint_value), abs(fd_value))
    rel_err = 0.0 if denom == 0.0 else abs(adjoint_value - fd_value) / denom
    return adjoint_value, fd_value, rel_err
