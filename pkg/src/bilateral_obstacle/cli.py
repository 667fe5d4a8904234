"""Command line driver: solve, sweep, oracle-compare, grad-check.

Configuration comes from an optional flat ``key = value`` file and from
flags; flags win.  Every run writes plain CSV/key=value files into its
output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .expr import Expression, ExpressionError
from .grid import GridSpec, make_grid, sample, sup_norm
from .oracle import fd_gradient_check, psor_solve
from .solver import (
    Contact,
    Iterate,
    ProblemData,
    SolverConfig,
    contact_region,
    control_order_violation,
    converge_state,
    h2_seminorm,
    obstacle_violation,
    run,
)

log = logging.getLogger(__name__)

BUILTIN = {
    "test1d": (1, "100*x*cos(3*pi*x)", "cos(4*pi*x^2)"),
    "test2d": (2, "x^3*sin(2*pi*x^2)*y*cos(2*pi*y^2)", "sin(2*pi*x^2)*cos(2*pi*y^2)"),
}
DEFAULTS = {
    1: dict(n=200, delta="h^2", omega=0.75, problem="test1d"),
    2: dict(n=40, delta="h^4", omega=0.5, problem="test2d"),
}
SWEEP_AXES = ("omega", "n", "nu", "delta")
DEFAULT_DELTA_SCHEDULE = (1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4)


@dataclass(frozen=True)
class RunConfig:
    dim: int = 1
    n: int = 200
    delta: str = "h^2"
    nu: float = 1.0
    omega_y: float = 0.75
    omega_phi: float = 0.75
    omega_psi: float = 0.75
    eps: float = 1e-8
    max_iter: int = 10000
    inner_newton: int = 1
    problem: str | None = "test1d"
    f_expr: str | None = None
    z_expr: str | None = None
    y0: str = "0"
    phi0: str = "0"
    psi0: str = "0"
    output: str = "out"
    contact_tol: float | None = None
    sweep_axis: str | None = None
    sweep_values: tuple = ()
    seed: int = 0
    grad_step: float = 1e-5
    delta_schedule: tuple = DEFAULT_DELTA_SCHEDULE
    jobs: int = 1

    @property
    def grid(self) -> GridSpec:
        return make_grid(self.dim, self.n)

    @property
    def delta_value(self) -> float:
        return float(Expression(self.delta, ("h",))(self.grid.h))

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            delta=self.delta_value, nu=self.nu, omega_y=self.omega_y, omega_phi=self.omega_phi,
            omega_psi=self.omega_psi, eps=self.eps, max_iter=self.max_iter,
            inner_newton=self.inner_newton,
        )

    @property
    def contact_tolerance(self) -> float:
        return self.contact_tol if self.contact_tol is not None else math.sqrt(self.delta_value)

    def with_value(self, axis: str, value) -> "RunConfig":
        if axis == "omega":
            return dataclasses.replace(self, omega_y=value, omega_phi=value, omega_psi=value)
        if axis == "n":
            return dataclasses.replace(self, n=int(value))
        if axis == "delta":
            return dataclasses.replace(self, delta=repr(float(value)))
        return dataclasses.replace(self, **{axis: value})


# -- configuration -----------------------------------------------------------

_FLOAT_KEYS = {"nu", "omega", "omega_y", "omega_phi", "omega_psi", "eps", "contact_tol", "grad_step"}
_INT_KEYS = {"dim", "n", "max_iter", "inner_newton", "seed", "jobs"}
_STR_KEYS = {"delta", "problem", "f_expr", "z_expr", "y0", "phi0", "psi0", "output", "sweep_axis"}
_LIST_KEYS = {"sweep_values", "delta_schedule"}
KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | _STR_KEYS | _LIST_KEYS


def read_config_file(path) -> dict:
    values = {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _convert(key, value):
    if value is None:
        return None
    try:
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _INT_KEYS:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if key in _LIST_KEYS:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(float(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}") from None


def parse_config(file=None, overrides: dict | None = None) -> RunConfig:
    """Merge a config file and flag overrides into a validated RunConfig.

    Unset keys take the dimension-dependent defaults (1D: N=200, delta=h^2,
    omega=0.75; 2D: N=40, delta=h^4, omega=0.5).
    """
    raw = read_config_file(file) if file else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    vals = {k: _convert(k, v) for k, v in raw.items()}

    dim = vals.get("dim", 1)
    if dim not in (1, 2):
        raise ConfigError("dim", f"must be 1 or 2, got {dim}")
    d = DEFAULTS[dim]
    omega = vals.pop("omega", d["omega"])
    for k in ("omega_y", "omega_phi", "omega_psi"):
        vals.setdefault(k, omega)
    vals.setdefault("n", d["n"])
    vals.setdefault("delta", d["delta"])
    if vals.get("f_expr") is None and vals.get("z_expr") is None:
        vals.setdefault("problem", d["problem"])
    elif vals.get("problem") is not None:
        raise ConfigError("problem", "give either a built-in problem or f_expr/z_expr, not both")
    else:
        vals["problem"] = None

    cfg = RunConfig(**vals)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.n < 1:
        raise ConfigError("n", f"must be >= 1, got {cfg.n}")
    for k in ("omega_y", "omega_phi", "omega_psi"):
        v = getattr(cfg, k)
        if not 0 < v <= 1:
            raise ConfigError(k, f"must lie in (0, 1], got {v}")
    try:
        delta = cfg.delta_value
    except (ExpressionError, TypeError) as exc:
        raise ConfigError("delta", str(exc)) from None
    if not (delta > 0 and math.isfinite(delta)):
        raise ConfigError("delta", f"must be positive, got {delta}")
    for k in ("nu", "eps", "grad_step"):
        v = getattr(cfg, k)
        if not (v > 0 and math.isfinite(v)):
            raise ConfigError(k, f"must be positive, got {v}")
    if cfg.contact_tol is not None and not cfg.contact_tol > 0:
        raise ConfigError("contact_tol", f"must be positive, got {cfg.contact_tol}")
    if cfg.max_iter < 0:
        raise ConfigError("max_iter", f"must be >= 0, got {cfg.max_iter}")
    if cfg.inner_newton < 1:
        raise ConfigError("inner_newton", f"must be >= 1, got {cfg.inner_newton}")
    if cfg.jobs < 1:
        raise ConfigError("jobs", f"must be >= 1, got {cfg.jobs}")
    if cfg.problem is not None:
        if cfg.problem not in BUILTIN:
            raise ConfigError("problem", f"unknown built-in {cfg.problem!r}; choose from {sorted(BUILTIN)}")
        if BUILTIN[cfg.problem][0] != cfg.dim:
            raise ConfigError("problem", f"{cfg.problem} is a {BUILTIN[cfg.problem][0]}D problem but dim={cfg.dim}")
    elif cfg.f_expr is None or cfg.z_expr is None:
        raise ConfigError("f_expr" if cfg.f_expr is None else "z_expr", "both f_expr and z_expr are required")
    variables = ("x", "y")[: cfg.dim]
    for k in ("f_expr", "z_expr", "y0", "phi0", "psi0"):
        text = getattr(cfg, k)
        if text is not None:
            try:
                Expression(text, variables)
            except ExpressionError as exc:
                raise ConfigError(k, str(exc)) from None
    if cfg.sweep_axis is not None:
        if cfg.sweep_axis not in SWEEP_AXES:
            raise ConfigError("sweep_axis", f"must be one of {SWEEP_AXES}")
        if not cfg.sweep_values:
            raise ConfigError("sweep_values", "must be nonempty when sweep_axis is set")
    if not cfg.delta_schedule or any(not v > 0 for v in cfg.delta_schedule):
        raise ConfigError("delta_schedule", "must be a nonempty list of positive values")


# -- problems ----------------------------------------------------------------

def _sample_expr(grid: GridSpec, text: str) -> np.ndarray:
    return sample(grid, Expression(text, ("x", "y")[: grid.dim]))


def builtin_problem(name: str, grid: GridSpec) -> ProblemData:
    if name not in BUILTIN:
        raise ValueError(f"unknown built-in problem {name!r}")
    dim, f_text, z_text = BUILTIN[name]
    if dim != grid.dim:
        raise ValueError(f"{name} needs a {dim}D grid, got {grid.dim}D")
    return ProblemData(grid, _sample_expr(grid, f_text), _sample_expr(grid, z_text))


def problem_for(cfg: RunConfig) -> ProblemData:
    grid = cfg.grid
    if cfg.problem is not None:
        return builtin_problem(cfg.problem, grid)
    return ProblemData(grid, _sample_expr(grid, cfg.f_expr), _sample_expr(grid, cfg.z_expr))


def initial_iterate(cfg: RunConfig) -> Iterate:
    grid = cfg.grid
    return Iterate(
        y=_sample_expr(grid, cfg.y0), p=grid.zeros(), phi=_sample_expr(grid, cfg.phi0),
        psi=_sample_expr(grid, cfg.psi0), lam=grid.zeros(),
    )


# -- output ------------------------------------------------------------------

ITER_COLUMNS = ("n", "J", "eps_n", "res_state", "res_psi", "res_phi", "mu1_norm", "mu2_norm")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def _write_csv(path: Path, header, rows):
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def _write_summary(path: Path, items: dict):
    try:
        path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in items.items()))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def _coord_names(dim):
    return ("x1",) if dim == 1 else ("x1", "x2")


def run_case(cfg: RunConfig, out: Path | None = None) -> dict:
    """Solve one configuration and write iterations.csv, fields.csv and summary.txt.

    Returns the summary dictionary.  A singular termination is an ordinary
    outcome here, recorded in the summary.
    """
    out = Path(cfg.output if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    prob = problem_for(cfg)
    scfg = cfg.solver_config()
    t0 = time.perf_counter()
    final, records, status = run(scfg, prob, initial_iterate(cfg))
    wall = time.perf_counter() - t0

    _write_csv(out / "iterations.csv", ITER_COLUMNS,
               ([getattr(r, c) for c in ITER_COLUMNS] for r in records))
    codes = contact_region(final.y, final.phi, final.psi, cfg.contact_tolerance)
    coords = prob.grid.coords()
    columns = (*_coord_names(cfg.dim), "y", "phi", "psi", "p", "lambda", "f", "z", "contact")
    rows = zip(*coords, final.y, final.phi, final.psi, final.p, final.lam, prob.f, prob.z, codes)
    _write_csv(out / "fields.csv", columns, rows)

    last = records[-1] if records else None
    summary = {
        "termination": status.value,
        "iterations": len(records),
        "final_J": last.J if last else float("nan"),
        "final_eps_n": last.eps_n if last else float("nan"),
        "final_dJ": abs(records[-1].J - records[-2].J) if len(records) > 1 else float("nan"),
        "max_obstacle_violation": obstacle_violation(final.y, final.phi, final.psi),
        "max_control_order_violation": control_order_violation(final.phi, final.psi),
        "h2_seminorm_phi": h2_seminorm(prob, final.phi),
        "h2_seminorm_psi": h2_seminorm(prob, final.psi),
        "contact_lower": int(np.sum(codes == Contact.LOWER.value)),
        "contact_upper": int(np.sum(codes == Contact.UPPER.value)),
        "contact_inactive": int(np.sum(codes == Contact.INACTIVE.value)),
        "contact_tol": cfg.contact_tolerance,
        "dim": cfg.dim,
        "n": cfg.n,
        "h": prob.grid.h,
        "delta": scfg.delta,
        "nu": scfg.nu,
        "omega_y": scfg.omega_y,
        "omega_phi": scfg.omega_phi,
        "omega_psi": scfg.omega_psi,
        "eps": scfg.eps,
        "max_iter": scfg.max_iter,
        "inner_newton": scfg.inner_newton,
        "wall_time_s": wall,
    }
    _write_summary(out / "summary.txt", summary)
    log.info("%s: %s after %d iterations, J=%s", out, status.value, len(records), summary["final_J"])
    return summary


def _sweep_dirname(axis, value):
    return f"{axis}={_fmt(value)}"


def _run_sweep_entry(args):
    cfg, out = args
    return run_case(cfg, out)


def run_sweep(cfg: RunConfig) -> list[dict]:
    """Run one case per sweep value in its own subdirectory, then write sweep.csv."""
    root = Path(cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    axis = cfg.sweep_axis
    jobs = [(cfg.with_value(axis, v), root / _sweep_dirname(axis, v)) for v in cfg.sweep_values]
    for sub, _ in jobs:
        validate(sub)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_sweep_entry, jobs))
    else:
        results = [_run_sweep_entry(j) for j in jobs]
    _write_csv(root / "sweep.csv", ("value", "iterations", "final_J", "final_eps_n", "termination"),
               ((v, r["iterations"], r["final_J"], r["final_eps_n"], r["termination"])
                for v, r in zip(cfg.sweep_values, results)))
    return results


def oracle_compare(cfg: RunConfig, out: Path | None = None) -> list[dict]:
    """Penalized state vs PSOR at the fixed obstacles (phi0, psi0) over the delta schedule."""
    out = Path(cfg.output if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    prob = problem_for(cfg)
    it = initial_iterate(cfg)
    phi, psi = it.phi, it.psi
    y_vi = psor_solve(prob.op, prob.f, phi, psi)
    rows = []
    y = None
    for delta in cfg.delta_schedule:
        y, res = converge_state(delta, prob, phi, psi, y0=y)
        rows.append(dict(
            delta=delta,
            err_sup=sup_norm(y - y_vi),
            violation=obstacle_violation(y, phi, psi),
            lower_violation=float(max(0.0, np.max(phi - y))),
            upper_violation=float(max(0.0, np.max(y - psi))),
            state_residual=res,
        ))
    cols = ("delta", "err_sup", "violation", "lower_violation", "upper_violation", "state_residual")
    _write_csv(out / "oracle_compare.csv", cols, ([r[c] for c in cols] for r in rows))
    errs = [r["err_sup"] for r in rows]
    viols = [r["violation"] for r in rows]
    _write_summary(out / "oracle_summary.txt", {
        "err_nonincreasing": str(all(b <= a for a, b in zip(errs, errs[1:]))),
        "violation_nonincreasing": str(all(b <= a for a, b in zip(viols, viols[1:]))),
        "violation_ratio_first_last": viols[0] / viols[-1] if viols[-1] > 0 else float("inf"),
        "psor_contact_nodes": int(np.sum((y_vi - phi <= 1e-9) | (psi - y_vi <= 1e-9))),
    })
    return rows


def grad_check(cfg: RunConfig, out: Path | None = None) -> list[dict]:
    """Adjoint vs finite-difference derivative in a seeded random direction for several steps."""
    out = Path(cfg.output if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    prob = problem_for(cfg)
    it = initial_iterate(cfg)
    direction = np.random.default_rng(cfg.seed).standard_normal(prob.grid.size)
    scfg = cfg.solver_config()
    steps = sorted({cfg.grad_step, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7}, reverse=True)
    rows = []
    for step in steps:
        adj, fd, rel = fd_gradient_check(scfg, prob, it.phi, it.psi, direction, step)
        rows.append(dict(step=step, adjoint=adj, fd=fd, rel_err=rel))
    cols = ("step", "adjoint", "fd", "rel_err")
    _write_csv(out / "grad_check.csv", cols, ([r[c] for c in cols] for r in rows))
    return rows


# -- argument parsing --------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("-c", "--config", help="flat key=value configuration file")
    p.add_argument("-o", "--output", help="output directory (default: out)")
    p.add_argument("--dim", type=int)
    p.add_argument("--n", "-N", type=int, help="interior points per axis")
    p.add_argument("--delta", help="penalty parameter; may use h, e.g. 'h^2'")
    p.add_argument("--nu", type=float)
    p.add_argument("--omega", type=float, help="sets omega_y, omega_phi and omega_psi")
    p.add_argument("--omega-y", dest="omega_y", type=float)
    p.add_argument("--omega-phi", dest="omega_phi", type=float)
    p.add_argument("--omega-psi", dest="omega_psi", type=float)
    p.add_argument("--eps", type=float, help="stop when |J_n - J_{n-1}| <= eps")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--inner-newton", dest="inner_newton", type=int)
    p.add_argument("--problem", choices=sorted(BUILTIN))
    p.add_argument("--f", dest="f_expr", help="source expression in x (and y)")
    p.add_argument("--z", dest="z_expr", help="target expression in x (and y)")
    p.add_argument("--y0")
    p.add_argument("--phi0", help="initial (or, for oracle-compare/grad-check, fixed) lower obstacle")
    p.add_argument("--psi0", help="initial (or fixed) upper obstacle")
    p.add_argument("--contact-tol", dest="contact_tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilateral-obstacle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("solve", help="run one case"))
    sw = sub.add_parser("sweep", help="run one case per parameter value")
    _add_common(sw)
    sw.add_argument("--axis", dest="sweep_axis", choices=SWEEP_AXES)
    sw.add_argument("--values", dest="sweep_values", help="comma separated values")
    sw.add_argument("--jobs", type=int, help="parallel worker processes")
    oc = sub.add_parser("oracle-compare", help="penalized state vs PSOR over a delta schedule")
    _add_common(oc)
    oc.add_argument("--deltas", dest="delta_schedule", help="comma separated delta values")
    gc = sub.add_parser("grad-check", help="adjoint vs finite-difference derivative")
    _add_common(gc)
    gc.add_argument("--step", dest="grad_step", type=float)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "solve":
            s = run_case(cfg)
            print(f"{s['termination']} after {s['iterations']} iterations, J = {s['final_J']:.10g}")
        elif args.command == "sweep":
            if cfg.sweep_axis is None:
                print("error: sweep needs --axis and --values", file=sys.stderr)
                return 2
            for v, s in zip(cfg.sweep_values, run_sweep(cfg)):
                print(f"{cfg.sweep_axis}={v:g}: {s['termination']} after {s['iterations']} iterations, "
                      f"J = {s['final_J']:.10g}")
        elif args.command == "oracle-compare":
            for r in oracle_compare(cfg):
                print(f"delta={r['delta']:.4g}  |y-y_vi|={r['err_sup']:.4e}  violation={r['violation']:.4e}")
        elif args.command == "grad-check":
            for r in grad_check(cfg):
                print(f"step={r['step']:.0e}  adjoint={r['adjoint']:.10e}  fd={r['fd']:.10e}  "
                      f"rel_err={r['rel_err']:.2e}")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
