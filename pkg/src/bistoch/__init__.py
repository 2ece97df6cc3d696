"""Bilevel stochastic optimization toolkit.

Problems expose stochastic oracles for an upper-level objective f_u(x, y)
and a lower-level objective f_l(x, y); solvers descend the reduced function
f(x) = f_u(x, y(x)) using adjoint-based, rank-1, finite-difference, or
constrained LQ directions, and emit per-iteration traces with accessed-data
accounting. See the bench CLI (`bistoch --help`) for runnable comparisons.
"""

from .bench import (
    ConfigError,
    RateFit,
    compare_table,
    config_hash,
    demo_config,
    fit_rate,
    parse_config,
    read_trace_csv,
    run_config,
    write_trace_csv,
)
from .directions import (
    DirectionSpec,
    LQResult,
    adjoint_direction,
    adjoint_direction_direct,
    bsg1_direction,
    darts_direction,
    direction_from_sample,
    lq_direction,
)
from .linalg import (
    LinearOperator,
    ProjectionSet,
    SingularSystemError,
    cg_solve,
    matrix_operator,
    project,
    solve_linear,
)
from .problem import (
    AccessCounter,
    BatchSpec,
    CapabilityError,
    ConstraintData,
    ConstraintSet,
    Draw,
    Iterate,
    OracleSample,
    ProblemHandle,
    StreamBank,
    true_f,
)
from .solvers import (
    InnerPolicy,
    RunTrace,
    SamplingPolicy,
    SolverConfig,
    StepsizeSchedule,
    TraceRecord,
    dynamic_batch_size,
    fd_reduced_gradient,
    inc_acc_update,
    inner_solve,
    run_bsg,
    run_darts,
)

__version__ = "0.1.0"

__all__ = [
    "AccessCounter",
    "BatchSpec",
    "CapabilityError",
    "ConfigError",
    "ConstraintData",
    "ConstraintSet",
    "DirectionSpec",
    "Draw",
    "InnerPolicy",
    "Iterate",
    "LQResult",
    "LinearOperator",
    "OracleSample",
    "ProblemHandle",
    "ProjectionSet",
    "RateFit",
    "RunTrace",
    "SamplingPolicy",
    "SingularSystemError",
    "SolverConfig",
    "StepsizeSchedule",
    "StreamBank",
    "TraceRecord",
    "adjoint_direction",
    "adjoint_direction_direct",
    "bsg1_direction",
    "cg_solve",
    "compare_table",
    "config_hash",
    "darts_direction",
    "demo_config",
    "direction_from_sample",
    "dynamic_batch_size",
    "fd_reduced_gradient",
    "fit_rate",
    "inc_acc_update",
    "inner_solve",
    "lq_direction",
    "matrix_operator",
    "parse_config",
    "project",
    "read_trace_csv",
    "run_bsg",
    "run_config",
    "run_darts",
    "solve_linear",
    "true_f",
    "write_trace_csv",
]
