"""Linear solves for ``(s*A_h + D) x = b`` with explicit singularity detection.

1D systems are tridiagonal and go through a banded LU factorization
(LAPACK ``gttrf``); a pivot below ``PIVOT_RTOL * ||A||`` is treated as
singular.  2D systems use Jacobi-preconditioned conjugate gradients.  The
Newton matrices of the control equations can be indefinite yet invertible,
so when CG meets a nonpositive diagonal or curvature the solve is handed to
MINRES; failure to reach the tolerance there is reported as singular.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack
from scipy.sparse.linalg import LinearOperator as ScipyOperator, minres

from .errors import SingularOperator
from .grid import LinearOperator

PIVOT_RTOL = 1e-12
DEFAULT_TOL = 1e-10


def solve(op: LinearOperator, rhs, tol: float = DEFAULT_TOL, max_iter: int | None = None,
          method: str = "auto", x0=None) -> np.ndarray:
    """Solve ``op @ x = rhs``.

    On return ``||op @ x - rhs||_2 <= tol * max(1, ||rhs||_2)``.
    ``method`` is ``"auto"`` (direct in 1D, CG in 2D), ``"direct"`` or ``"cg"``.
    Raises ``SingularOperator`` when the system cannot be solved reliably.
    """
    grid = op.grid
    b = grid.check(rhs, "rhs")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 20 * grid.n**2
    if method == "auto":
        method = "direct" if grid.dim == 1 else "cg"
    if method == "direct":
        if grid.dim != 1:
            raise ValueError("direct path is only available for 1D (tridiagonal) systems")
        return _solve_tridiagonal(op, b, tol)
    if method == "cg":
        return _solve_pcg(op, b, tol, max_iter, x0)
    raise ValueError(f"unknown method {method!r}")


def _bands(op: LinearOperator):
    a = op.stencil
    lower = op.scale * a.diagonal(-1)
    upper = op.scale * a.diagonal(1)
    return lower, op.diagonal(), upper


def _solve_tridiagonal(op, b, tol):
    dl, d, du = _bands(op)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(dl))):
        raise SingularOperator("non-finite matrix entries")
    scale = max(np.max(np.abs(d)), 2 * np.max(np.abs(dl), initial=0.0))
    if scale == 0.0:
        raise SingularOperator("zero matrix")
    n = d.size
    if n <= 2:
        # scipy's gttrf wrapper rejects n = 2; a dense LU is equivalent here
        lu, piv, info = lapack.dgetrf(np.diag(d) + np.diag(dl, -1) + np.diag(du, 1))
        pivots = np.diag(lu)

        def lu_solve(rhs):
            return lapack.dgetrs(lu, piv, rhs)[0]
    else:
        dl_f, d_f, du_f, du2, ipiv, info = lapack.dgttrf(dl, d, du)
        pivots = d_f

        def lu_solve(rhs):
            x, info = lapack.dgttrs(dl_f, d_f, du_f, du2, ipiv, rhs)
            if info != 0:
                raise SingularOperator(f"gttrs failed with info={info}")
            return x

    if info > 0:
        raise SingularOperator(f"zero pivot at row {info - 1}")
    small = np.flatnonzero(np.abs(pivots) <= PIVOT_RTOL * scale)
    if small.size:
        raise SingularOperator(f"pivot {pivots[small[0]]:.3e} at row {small[0]} below threshold")

    x = lu_solve(b)
    bound = tol * max(1.0, np.linalg.norm(b))
    # a couple of refinement passes for badly scaled systems
    for _ in range(3):
        r = b - op.matvec(x)
        if np.linalg.norm(r) <= bound:
            break
        x = x + lu_solve(r)
    if not np.all(np.isfinite(x)):
        raise SingularOperator("non-finite solution")
    return x


class _Indefinite(Exception):
    pass


def _solve_pcg(op, b, tol, max_iter, x0):
    try:
        return _pcg(op, b, tol, max_iter, x0)
    except _Indefinite:
        return _solve_minres(op, b, tol, max_iter, x0)


def _pcg(op, b, tol, max_iter, x0):
    diag = op.diagonal()
    if not np.all(np.isfinite(diag)):
        raise SingularOperator("non-finite diagonal")
    if np.any(diag <= 0):
        raise _Indefinite
    minv = 1.0 / diag
    bound = tol * max(1.0, np.linalg.norm(b))

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    for _restart in range(3):
        r = b - op.matvec(x)
        if np.linalg.norm(r) <= bound:
            return x
        z = minv * r
        d = z.copy()
        rz = r @ z
        for _ in range(max_iter):
            q = op.matvec(d)
            curv = d @ q
            if not curv > 0:
                raise _Indefinite
            alpha = rz / curv
            x += alpha * d
            r -= alpha * q
            if np.linalg.norm(r) <= bound:
                break
            z = minv * r
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
        else:
            raise SingularOperator(f"CG did not converge in {max_iter} iterations")
    # recursive residual drifted from the true one; check one last time
    if np.linalg.norm(b - op.matvec(x)) <= bound:
        return x
    raise SingularOperator("CG stagnated above the requested tolerance")


def _solve_minres(op, b, tol, max_iter, x0):
    n = b.size
    bnorm = np.linalg.norm(b)
    bound = tol * max(1.0, bnorm)
    if bnorm == 0.0:
        return np.zeros_like(b)
    d = np.abs(op.diagonal())
    if not np.all(np.isfinite(d)):
        raise SingularOperator("non-finite diagonal")
    mat = ScipyOperator((n, n), matvec=op.matvec, dtype=float)
    prec = None
    if np.all(d > 0):
        prec = ScipyOperator((n, n), matvec=lambda v: v / d, dtype=float)
    # minres stops on its own residual estimate, which can be far more
    # optimistic than the true residual here; warm-restart with tighter rtol
    x = None if x0 is None else np.array(x0, dtype=float)
    rtol = bound / bnorm
    for _ in range(7):
        x, _info = minres(mat, b, x0=x, rtol=rtol, maxiter=max_iter, M=prec)
        res = np.linalg.norm(b - op.matvec(x))
        if np.all(np.isfinite(x)) and res <= bound:
            return x
        rtol *= 0.1
    raise SingularOperator(f"MINRES residual {res:.3e} above {bound:.3e}: operator is (nearly) singular")
