"""Newton-damped Gauss-Seidel iteration for the penalized optimality system.

One outer iteration updates, in order,

    y    state      A y + beta(y - phi) - beta(psi - y) = f
    p    adjoint    (A + diag(beta'(y - phi)) + diag(beta'(psi - y))) p = y - z
    lam  multiplier lam = nu A phi + beta'(y - phi) p
    psi  upper      nu A psi + beta'(psi - y) p + lam = 0
    phi  lower      nu A phi + beta'(y - phi) p - lam = 0

where the three nonlinear equations each receive ``inner_newton`` damped
Newton corrections, and stops once consecutive costs differ by at most eps.
``A`` is the positive definite finite-difference -Laplacian.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularOperator
from .grid import GridSpec, LinearOperator, assemble_neg_laplacian, dirichlet_energy, sup_norm
from .linsolve import DEFAULT_TOL, solve
from .penalty import beta, beta_prime, beta_second

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    delta: float
    nu: float = 1.0
    omega_y: float = 0.75
    omega_phi: float = 0.75
    omega_psi: float = 0.75
    eps: float = 1e-8
    max_iter: int = 10000
    inner_newton: int = 1
    lin_tol: float = DEFAULT_TOL

    def __post_init__(self):
        for name in ("delta", "nu", "eps", "lin_tol"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("omega_y", "omega_phi", "omega_psi"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.max_iter < 0 or int(self.max_iter) != self.max_iter:
            raise ValueError(f"max_iter must be a nonnegative integer, got {self.max_iter}")
        if self.inner_newton < 1:
            raise ValueError(f"inner_newton must be >= 1, got {self.inner_newton}")

    @classmethod
    def with_omega(cls, delta, omega, **kw):
        return cls(delta, omega_y=omega, omega_phi=omega, omega_psi=omega, **kw)


@dataclass(frozen=True)
class ProblemData:
    grid: GridSpec
    f: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", self.grid.check(self.f, "f"))
        object.__setattr__(self, "z", self.grid.check(self.z, "z"))

    @property
    def op(self) -> LinearOperator:
        return assemble_neg_laplacian(self.grid)


@dataclass(frozen=True)
class Iterate:
    y: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    lam: np.ndarray

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Iterate":
        return cls(*(grid.zeros() for _ in range(5)))

    def check(self, grid: GridSpec) -> "Iterate":
        for name in ("y", "p", "phi", "psi", "lam"):
            u = grid.check(getattr(self, name), name)
            if not np.all(np.isfinite(u)):
                raise ValueError(f"{name} has non-finite entries")
        return self


@dataclass
class IterationRecord:
    n: int
    J: float
    eps_n: float
    res_state: float
    res_psi: float
    res_phi: float
    mu1_norm: float
    mu2_norm: float


class Termination(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    SINGULAR = "Singular"


class Contact(str, enum.Enum):
    LOWER = "L"
    UPPER = "U"
    INACTIVE = "I"


# -- residuals ---------------------------------------------------------------

def state_residual(cfg, prob, y, phi, psi):
    A = prob.op
    return A @ y + beta(cfg.delta, y - phi) - beta(cfg.delta, psi - y) - prob.f


def psi_residual(cfg, A, y, p, psi, lam):
    return cfg.nu * (A @ psi) + beta_prime(cfg.delta, psi - y) * p + lam


def phi_residual(cfg, A, y, p, phi, lam):
    return cfg.nu * (A @ phi) + beta_prime(cfg.delta, y - phi) * p - lam


def _norm(v):
    return float(np.linalg.norm(v))


# -- sub-steps ---------------------------------------------------------------

def state_step(cfg: SolverConfig, prob: ProblemData, prev: Iterate):
    """Damped Newton correction(s) of the state at fixed obstacles.

    Returns the new state and the residual norm of the state equation there.
    """
    A = prob.op
    y, phi, psi = prev.y, prev.phi, prev.psi
    for _ in range(cfg.inner_newton):
        g = state_residual(cfg, prob, y, phi, psi)
        jac = A.with_diag(beta_prime(cfg.delta, y - phi) + beta_prime(cfg.delta, psi - y))
        r = solve(jac, -cfg.omega_y * g, tol=cfg.lin_tol)
        y = y + r
    return y, _norm(state_residual(cfg, prob, y, phi, psi))


def adjoint_operator(cfg, prob, y, phi, psi) -> LinearOperator:
    return prob.op.with_diag(beta_prime(cfg.delta, y - phi) + beta_prime(cfg.delta, psi - y))


def adjoint_solve(cfg: SolverConfig, prob: ProblemData, y, phi_prev, psi_prev) -> np.ndarray:
    return solve(adjoint_operator(cfg, prob, y, phi_prev, psi_prev), y - prob.z, tol=cfg.lin_tol)


def multiplier_lambda(cfg: SolverConfig, grid: GridSpec, y, phi_prev, p) -> np.ndarray:
    A = assemble_neg_laplacian(grid)
    return cfg.nu * (A @ phi_prev) + beta_prime(cfg.delta, y - phi_prev) * p


def psi_step(cfg: SolverConfig, prob: ProblemData, y, p, psi_prev, lam):
    A = prob.op
    psi = psi_prev
    for _ in range(cfg.inner_newton):
        g = psi_residual(cfg, A, y, p, psi, lam)
        jac = A.scaled(cfg.nu).with_diag(beta_second(cfg.delta, psi - y) * p)
        psi = psi + solve(jac, -cfg.omega_psi * g, tol=cfg.lin_tol)
    return psi, _norm(psi_residual(cfg, A, y, p, psi, lam))


def phi_step(cfg: SolverConfig, prob: ProblemData, y, p, phi_prev, lam):
    A = prob.op
    phi = phi_prev
    for _ in range(cfg.inner_newton):
        g = phi_residual(cfg, A, y, p, phi, lam)
        jac = A.scaled(cfg.nu).with_diag(-beta_second(cfg.delta, y - phi) * p)
        phi = phi + solve(jac, -cfg.omega_phi * g, tol=cfg.lin_tol)
    return phi, _norm(phi_residual(cfg, A, y, p, phi, lam))


def tracking_cost(prob: ProblemData, y) -> float:
    d = y - prob.z
    return 0.5 * prob.grid.cell * float(d @ d)


def cost(cfg: SolverConfig, prob: ProblemData, y, phi, psi) -> float:
    A = prob.op
    return tracking_cost(prob, y) + 0.5 * cfg.nu * (dirichlet_energy(A, phi) + dirichlet_energy(A, psi))


# -- outer loop --------------------------------------------------------------

def run(cfg: SolverConfig, prob: ProblemData, init: Iterate | None = None, callback=None):
    """Run the outer iteration.

    Returns ``(final, records, termination)``.  A singular linearization
    (or a blow-up to non-finite values) ends the run with
    ``Termination.SINGULAR`` and ``final`` is the last completed iterate.
    """
    grid = prob.grid
    it = Iterate.zeros(grid) if init is None else init.check(grid)
    records: list[IterationRecord] = []
    if cfg.max_iter == 0:
        return it, records, Termination.MAX_ITER

    A = prob.op
    J_prev = cost(cfg, prob, it.y, it.phi, it.psi)
    status = Termination.MAX_ITER
    for n in range(1, cfg.max_iter + 1):
        try:
            y, res_y = state_step(cfg, prob, it)
            p = adjoint_solve(cfg, prob, y, it.phi, it.psi)
            lam = multiplier_lambda(cfg, grid, y, it.phi, p)
            psi, res_psi = psi_step(cfg, prob, y, p, it.psi, lam)
            phi, res_phi = phi_step(cfg, prob, y, p, it.phi, lam)
        except SingularOperator as exc:
            log.info("iteration %d: singular linearization (%s)", n, exc)
            status = Termination.SINGULAR
            break
        J = cost(cfg, prob, y, phi, psi)
        new = Iterate(y, p, phi, psi, lam)
        if not (math.isfinite(J) and all(np.all(np.isfinite(u)) for u in (y, p, phi, psi, lam))):
            log.info("iteration %d: non-finite iterate", n)
            status = Termination.SINGULAR
            break
        rec = IterationRecord(
            n=n,
            J=J,
            eps_n=max(sup_norm(y - it.y), sup_norm(phi - it.phi)),
            res_state=res_y,
            res_psi=res_psi,
            res_phi=res_phi,
            mu1_norm=sup_norm(beta_prime(cfg.delta, y - phi) * p),
            mu2_norm=sup_norm(beta_prime(cfg.delta, psi - y) * p),
        )
        records.append(rec)
        it = new
        if callback is not None:
            callback(rec)
        if abs(J - J_prev) <= cfg.eps:
            status = Termination.CONVERGED
            break
        J_prev = J
    return it, records, status


# -- diagnostics -------------------------------------------------------------

def contact_region(y, phi, psi, tol: float) -> np.ndarray:
    """Per-node contact codes ``"L"``, ``"U"`` or ``"I"``; lower contact wins ties."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    y, phi, psi = (np.asarray(a, dtype=float) for a in (y, phi, psi))
    out = np.full(y.shape, Contact.INACTIVE.value)
    out[psi - y <= tol] = Contact.UPPER.value
    out[y - phi <= tol] = Contact.LOWER.value
    return out


def obstacle_violation(y, phi, psi) -> float:
    """max_i max(phi_i - y_i, y_i - psi_i, 0)."""
    return float(max(0.0, np.max(phi - y), np.max(y - psi)))


def control_order_violation(phi, psi) -> float:
    return float(max(0.0, np.max(phi - psi)))


def h2_seminorm(prob: ProblemData, u) -> float:
    """Discrete L2 norm of A_h u, a proxy for |u|_{H^2}."""
    Au = prob.op @ u
    return float(np.sqrt(prob.grid.cell * Au @ Au))


def converge_state(delta: float, prob: ProblemData, phi, psi, y0=None, rtol: float = 1e-12,
                   max_newton: int = 200, lin_tol: float = 1e-12):
    """Solve the penalized state equation at fixed obstacles to full accuracy.

    Undamped Newton with residual backtracking.  Convergence is declared when
    ``||G(y)||_2 <= rtol * (||f||_2 + ||A y||_2 + 1)`` or when the residual
    stops decreasing at rounding level.  Returns ``(y, residual_norm)``.
    """
    cfg = SolverConfig(delta=delta, lin_tol=lin_tol)
    A = prob.op
    y = prob.grid.zeros() if y0 is None else np.array(y0, dtype=float)
    g = state_residual(cfg, prob, y, phi, psi)
    res = _norm(g)
    for _ in range(max_newton):
        scale = _norm(prob.f) + _norm(A @ y) + 1.0
        if res <= rtol * scale:
            break
        jac = A.with_diag(beta_prime(delta, y - phi) + beta_prime(delta, psi - y))
        step = solve(jac, -g, tol=lin_tol)
        t = 1.0
        while True:
            y_try = y + t * step
            g_try = state_residual(cfg, prob, y_try, phi, psi)
            res_try = _norm(g_try)
            if res_try < res or t < 1e-8:
                break
            t *= 0.5
        if res_try >= res:
            # no decrease even for tiny steps: rounding floor reached
            break
        y, g, res = y_try, g_try, res_try
    return y, res
