import dataclasses

import numpy as np
import pytest

from bilateral_obstacle import (
    Contact, Iterate, ProblemData, SolverConfig, Termination, adjoint_solve, assemble_neg_laplacian,
    beta_prime, contact_region, cost, make_grid, multiplier_lambda, phi_step, psi_step, run, solve,
    state_step, sup_norm,
)
from bilateral_obstacle.cli import builtin_problem
from bilateral_obstacle.solver import (
    converge_state, obstacle_violation, phi_residual, psi_residual, state_residual, tracking_cost,
)


def _const(g, c):
    return np.full(g.size, float(c))


@pytest.fixture(scope="module")
def test1():
    g = make_grid(1, 200)
    return SolverConfig.with_omega(g.h**2, 0.75), builtin_problem("test1d", g)


# -- configuration -----------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(delta=0), dict(delta=1, nu=-1), dict(delta=1, omega_y=0), dict(delta=1, omega_psi=1.5),
    dict(delta=1, eps=0), dict(delta=1, max_iter=-1), dict(delta=1, inner_newton=0),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_problem_shape_check():
    g = make_grid(1, 4)
    with pytest.raises(ValueError):
        ProblemData(g, np.zeros(3), np.zeros(4))


# -- cost --------------------------------------------------------------------

def test_cost_examples():
    g = make_grid(1, 3)
    z = np.array([0.3, -1.0, 2.0])
    prob = ProblemData(g, g.zeros(), z)
    zero = g.zeros()
    assert cost(SolverConfig(1.0), prob, z, zero, zero) == 0.0
    for nu in (0.1, 1.0, 7.0):
        assert cost(SolverConfig(1.0, nu=nu), prob, z + 1, zero, zero) == pytest.approx(0.375)
    assert cost(SolverConfig(1.0), prob, z, np.array([0.0, 1.0, 0.0]), zero) == pytest.approx(4.0)


# -- state step ----------------------------------------------------------------

def test_state_null_action():
    g = make_grid(1, 20)
    A = assemble_neg_laplacian(g)
    f = np.random.default_rng(0).standard_normal(g.size)
    y = solve(A, f, tol=1e-14)
    prob = ProblemData(g, f, g.zeros())
    prev = Iterate(y, g.zeros(), _const(g, -1e3), _const(g, 1e3), g.zeros())
    y_new, res = state_step(SolverConfig(1e-2), prob, prev)
    assert np.max(np.abs(y_new - y)) <= 1e-12
    assert res <= 1e-10


def test_state_one_step_exact():
    g = make_grid(2, 6)
    f = np.random.default_rng(1).uniform(-1, 1, g.size)
    prob = ProblemData(g, f, g.zeros())
    prev = Iterate(g.zeros(), g.zeros(), _const(g, -1e3), _const(g, 1e3), g.zeros())
    y, _ = state_step(SolverConfig(1e-2, omega_y=1.0), prob, prev)
    np.testing.assert_allclose(y, solve(prob.op, f, tol=1e-13), atol=1e-10)


def _state_change(cfg, prob, prev):
    before = np.linalg.norm(state_residual(cfg, prob, prev.y, prev.phi, prev.psi))
    _, after = state_step(cfg, prob, prev)
    return before, after


def test_state_residual_on_test1(test1):
    cfg, prob = test1
    start = Iterate.zeros(prob.grid)
    # from y = phi = psi = 0 every node sits on a kink where beta' = 0, so the
    # first linearization ignores the penalty and overshoots
    before, after = _state_change(cfg, prob, start)
    assert after > before
    second, _, _ = run(dataclasses.replace(cfg, max_iter=1), prob, start)
    before, after = _state_change(cfg, prob, second)
    assert after < before


# -- adjoint -----------------------------------------------------------------

def test_adjoint_examples():
    g = make_grid(1, 3)
    far = _const(g, 10.0)
    y = np.array([0.1, 0.2, 0.3])
    cfg = SolverConfig(0.1)
    assert np.all(adjoint_solve(cfg, ProblemData(g, g.zeros(), y), y, -far, far) == 0)
    p = adjoint_solve(cfg, ProblemData(g, g.zeros(), y - 1), y, -far, far)
    np.testing.assert_allclose(p, [0.09375, 0.125, 0.09375], atol=1e-12)


def test_adjoint_operator_symmetric():
    from bilateral_obstacle.solver import adjoint_operator
    g = make_grid(2, 6)
    rng = np.random.default_rng(2)
    y = rng.uniform(-1, 1, g.size)
    prob = ProblemData(g, g.zeros(), g.zeros())
    op = adjoint_operator(SolverConfig(1e-2), prob, y, y - rng.uniform(-0.3, 0.3, g.size), y + 0.1)
    u, v = rng.standard_normal((2, g.size))
    assert abs(u @ (op @ v) - v @ (op @ u)) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(v) * 1e4


def test_adjoint_gradient_wrt_source():
    # inactive obstacles: y(f) = A^{-1} f, derivative of the tracking cost is h^d p.v
    g = make_grid(1, 40)
    rng = np.random.default_rng(4)
    x, = g.coords()
    f, v = np.sin(3 * x) * 20, rng.standard_normal(g.size)
    z = np.cos(2 * x)
    cfg = SolverConfig(1e-2, lin_tol=1e-13)
    phi, psi = _const(g, -100), _const(g, 100)
    y = solve(ProblemData(g, f, z).op, f, tol=1e-14)
    p = adjoint_solve(cfg, ProblemData(g, f, z), y, phi, psi)
    adj = g.cell * p @ v
    s = 1e-4
    costs = []
    for sign in (1, -1):
        fs = f + sign * s * v
        costs.append(tracking_cost(ProblemData(g, fs, z), solve(ProblemData(g, fs, z).op, fs, tol=1e-14)))
    fd = (costs[0] - costs[1]) / (2 * s)
    assert abs(adj - fd) <= 1e-6 * abs(fd)


# -- multiplier ----------------------------------------------------------------

def test_lambda_zero():
    g = make_grid(1, 5)
    p = np.random.default_rng(0).standard_normal(5)
    lam = multiplier_lambda(SolverConfig(1e-2), g, np.abs(p), g.zeros(), p)
    assert np.all(lam == 0)


def test_lambda_single_node():
    g = make_grid(2, 1)
    lam = multiplier_lambda(SolverConfig(1.0), g, np.array([3.0]), np.array([0.7]), np.array([5.0]))
    np.testing.assert_allclose(lam, [16 * 0.7])


def test_lambda_independent_formula(test1):
    cfg, prob = test1
    g = prob.grid
    it = Iterate.zeros(g)
    y, _ = state_step(cfg, prob, it)
    p = adjoint_solve(cfg, prob, y, it.phi, it.psi)
    lam = multiplier_lambda(cfg, g, y, it.phi, p)
    # direct stencil and hand-written branch formula
    phi = it.phi
    pad = np.concatenate(([0.0], phi, [0.0]))
    lap = (2 * pad[1:-1] - pad[:-2] - pad[2:]) / g.h**2
    r = y - phi
    bp = np.where(r >= 0, 0.0, np.where(r >= -0.5, -2 * r, 1.0)) / cfg.delta
    np.testing.assert_allclose(lam, cfg.nu * lap + bp * p, rtol=1e-13, atol=1e-12)


# -- control steps -----------------------------------------------------------

def _inactive_setup(dim=1, n=15, seed=0):
    g = make_grid(dim, n)
    rng = np.random.default_rng(seed)
    y = rng.uniform(-0.2, 0.2, g.size)
    p = rng.standard_normal(g.size)
    lam = rng.standard_normal(g.size)
    return g, ProblemData(g, g.zeros(), g.zeros()), y, p, lam


def test_psi_one_step_exact():
    g, prob, y, p, _ = _inactive_setup()
    cfg = SolverConfig(1e-2, nu=0.5, omega_psi=1.0, lin_tol=1e-13)
    # chosen so the new psi stays well above y
    x, = g.coords()
    lam = -0.5 * (prob.op @ (2 + np.sin(np.pi * x)))
    psi, res = psi_step(cfg, prob, y, p, _const(g, 5.0), lam)
    expected = -solve(prob.op, lam, tol=1e-14) / 0.5
    np.testing.assert_allclose(psi, expected, atol=1e-10)
    assert res <= 1e-8


def test_phi_one_step_exact():
    g, prob, y, p, lam = _inactive_setup(dim=2, n=5)
    cfg = SolverConfig(1e-2, nu=2.0, omega_phi=1.0, lin_tol=1e-13)
    phi, _ = phi_step(cfg, prob, y, p, _const(g, -5.0), lam)
    np.testing.assert_allclose(phi, solve(prob.op, lam, tol=1e-14) / 2.0, atol=1e-10)


def test_control_null_action():
    g, prob, y, p, _ = _inactive_setup()
    cfg = SolverConfig(1e-2)
    A = prob.op
    psi0 = _const(g, 3.0) + 0.1 * np.sin(np.arange(g.size))
    lam = -(cfg.nu * (A @ psi0) + beta_prime(cfg.delta, psi0 - y) * p)
    assert np.linalg.norm(psi_residual(cfg, A, y, p, psi0, lam)) <= 1e-12
    psi, _ = psi_step(cfg, prob, y, p, psi0, lam)
    assert np.max(np.abs(psi - psi0)) <= 1e-12
    phi0 = -psi0
    lam = cfg.nu * (A @ phi0) + beta_prime(cfg.delta, y - phi0) * p
    phi, _ = phi_step(cfg, prob, y, p, phi0, lam)
    assert np.max(np.abs(phi - phi0)) <= 1e-12


def test_control_residuals_on_test1(test1):
    cfg, prob = test1
    g = prob.grid
    it = Iterate.zeros(g)
    A = prob.op
    y, _ = state_step(cfg, prob, it)
    p = adjoint_solve(cfg, prob, y, it.phi, it.psi)
    lam = multiplier_lambda(cfg, g, y, it.phi, p)
    before = np.linalg.norm(psi_residual(cfg, A, y, p, it.psi, lam))
    psi, after = psi_step(cfg, prob, y, p, it.psi, lam)
    assert after < before
    # lambda is built from phi_prev, so the lower residual starts at zero and stays there
    before = np.linalg.norm(phi_residual(cfg, A, y, p, it.phi, lam))
    _, after = phi_step(cfg, prob, y, p, it.phi, lam)
    assert before == 0.0 and after <= before


# -- outer loop --------------------------------------------------------------

def test_run_max_iter_zero():
    g = make_grid(1, 5)
    init = Iterate.zeros(g)
    final, log, status = run(SolverConfig(1.0, max_iter=0), ProblemData(g, g.zeros(), g.zeros()), init)
    assert final is init and log == [] and status is Termination.MAX_ITER


def test_run_zero_problem():
    g = make_grid(2, 4)
    final, log, status = run(SolverConfig(1e-2), ProblemData(g, g.zeros(), g.zeros()))
    assert status is Termination.CONVERGED and len(log) == 1
    assert log[0].J == 0.0
    for u in (final.y, final.p, final.phi, final.psi, final.lam):
        assert np.all(u == 0)


def test_run_singular_is_reported():
    # 1-node grid: psi Jacobian 8 - 2p/delta vanishes exactly with p = 4
    g = make_grid(1, 1)
    prob = ProblemData(g, g.zeros(), np.array([-32.0]))
    init = Iterate(g.zeros(), g.zeros(), np.array([-10.0]), g.zeros(), g.zeros())
    final, log, status = run(SolverConfig(1.0), prob, init)
    assert status is Termination.SINGULAR and log == [] and final is init


def test_eps_n_recomputed():
    g = make_grid(1, 50)
    prob = builtin_problem("test1d", g)
    cfg = SolverConfig.with_omega(g.h**2, 0.75, max_iter=8)
    seen = []
    _, log, _ = run(cfg, prob, callback=seen.append)
    assert seen == log
    # replay one iteration at a time and recompute the differences
    it = Iterate.zeros(g)
    one = dataclasses.replace(cfg, max_iter=1)
    for rec in log:
        nxt, (step,), _ = run(one, prob, it)
        assert step.J == rec.J
        assert rec.eps_n == max(sup_norm(nxt.y - it.y), sup_norm(nxt.phi - it.phi))
        assert rec.J >= 0 and rec.eps_n >= 0
        it = nxt


def test_test1_n50_regression():
    g = make_grid(1, 50)
    prob = builtin_problem("test1d", g)
    _, log, status = run(SolverConfig.with_omega(g.h**2, 0.75), prob)
    assert status is Termination.CONVERGED and len(log) == 16
    assert log[-1].J == pytest.approx(0.26631688303916123, rel=1e-10)
    assert abs(log[-1].J - log[-2].J) <= 1e-8


def test_violation_shrinks_with_delta():
    g = make_grid(1, 200)
    prob = builtin_problem("test1d", g)
    viol = []
    for delta in (1e-2, 1e-3, 1e-4):
        final, _, status = run(SolverConfig.with_omega(delta, 0.75), prob)
        assert status is Termination.CONVERGED
        viol.append(obstacle_violation(final.y, final.phi, final.psi))
    assert viol[0] > viol[1] > viol[2]


def test_converge_state_accuracy():
    g = make_grid(1, 60)
    prob = builtin_problem("test1d", g)
    y, res = converge_state(1e-3, prob, _const(g, -0.1), _const(g, 0.1))
    cfg = SolverConfig(1e-3)
    assert np.linalg.norm(state_residual(cfg, prob, y, _const(g, -0.1), _const(g, 0.1))) == res
    assert res <= 1e-9 * (np.linalg.norm(prob.f) + np.linalg.norm(prob.op @ y) + 1)


# -- contact -----------------------------------------------------------------

def test_contact_region():
    y = np.array([0.0, 0.5, 1.0, 0.2])
    assert list(contact_region(y, y, y + 1, 1e-3)) == ["L"] * 4
    assert list(contact_region(np.zeros(4), -np.ones(4), np.ones(4), 0.5)) == ["I"] * 4
    codes = contact_region(y, np.zeros(4), np.ones(4), 1e-3)
    assert list(codes) == [Contact.LOWER, Contact.INACTIVE, Contact.UPPER, Contact.INACTIVE]
    # phi == psi: lower wins
    assert list(contact_region(np.zeros(1), np.zeros(1), np.zeros(1), 1e-3)) == ["L"]
    with pytest.raises(ValueError):
        contact_region(y, y, y, 0.0)


def test_state_map_stable_under_obstacle_perturbation():
    # comparison principle: the penalized state moves no more than the obstacles do
    g = make_grid(1, 100)
    prob = builtin_problem("test1d", g)
    x, = g.coords()
    phi, psi = -0.1 + 0 * x, 0.05 + 0.1 * np.sin(np.pi * x)
    v = np.random.default_rng(5).uniform(-1, 1, g.size)
    y, _ = converge_state(1e-3, prob, phi, psi)
    changes = []
    for t in (1e-2, 1e-4):
        y_phi, _ = converge_state(1e-3, prob, phi + t * v, psi, y0=y)
        y_psi, _ = converge_state(1e-3, prob, phi, psi + t * v, y0=y)
        d = max(sup_norm(y_phi - y), sup_norm(y_psi - y))
        assert d <= t * sup_norm(v) * (1 + 1e-8)
        changes.append(d)
    assert changes[1] < changes[0] / 50
