"""Penalized bilateral obstacle optimal control on finite-difference grids."""

from .errors import (
    ConfigError,
    InfeasibleObstacles,
    InvalidGrid,
    MaxIterExceeded,
    SampleError,
    SingularOperator,
    TooLarge,
)
from .grid import (
    GridSpec,
    LinearOperator,
    assemble_neg_laplacian,
    dirichlet_energy,
    l2_norm,
    make_grid,
    sample,
    sup_norm,
)
from .penalty import PenaltyParams, beta, beta_prime, beta_second
from .linsolve import solve
from .solver import (
    Contact,
    Iterate,
    IterationRecord,
    ProblemData,
    SolverConfig,
    Termination,
    adjoint_solve,
    contact_region,
    cost,
    multiplier_lambda,
    phi_step,
    psi_step,
    run,
    state_step,
)

__version__ = "0.1.0"
