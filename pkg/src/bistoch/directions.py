"""Search-direction engines for the upper-level step.

All engines output a descent-oriented direction d (the solver moves along
x + alpha * d). The adjoint family eliminates the LL sensitivity through the
LL Hessian; bsg_1 replaces both Hessian blocks by rank-1 outer products of
sampled gradients, collapsing the adjoint solve to one ratio; darts avoids
second-order information entirely with a paired finite-difference probe; lq
handles equality-constrained lower levels through a KKT elimination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import SingularSystemError, cg_solve, solve_linear
from .problem import BatchSpec, CapabilityError, Draw, Iterate, OracleSample, ProblemHandle

ENGINES = ("adjoint_exact", "bsg_h", "bsg_1", "darts", "lq")


@dataclass(frozen=True)
class DirectionSpec:
    """Engine choice plus the knobs the engines read.

    darts_eta is the LL stepsize that scales the finite-difference term
    (run_darts rewrites it each iteration from the LL schedule); darts_eta_one
    replaces that factor by 1. darts_scale_curvature divides the probe vector
    by ||gly||^2. cg_tol / cg_max_iter drive the bsg_h adjoint solve.
    denom_floor guards every division by a sampled quantity.
    """

    engine: str
    darts_eta: float = 1.0
    darts_scale_curvature: bool = False
    darts_eta_one: bool = False
    darts_fd_coeff: float = 0.01
    cg_tol: float = 1e-10
    cg_max_iter: Optional[int] = None
    denom_floor: float = 1e-12

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.darts_eta <= 0 or self.darts_fd_coeff <= 0:
            raise ValueError("darts_eta and darts_fd_coeff must be positive")
        if self.cg_tol <= 0 or self.denom_floor <= 0:
            raise ValueError("cg_tol and denom_floor must be positive")


def _require_hessians(s: OracleSample, engine: str) -> None:
    if s.hyy is None or s.hxy_t is None:
        raise CapabilityError(f"{engine} needs LL Hessian actions the sample does not carry")


def adjoint_direction(s: OracleSample, spec: DirectionSpec) -> np.ndarray:
    """d = -(gux + hxy_t(lambda)) with hyy lambda = -guy solved by CG.

    A non-positive-curvature exit keeps the partial CG iterate (the zero
    vector when the first direction is already bad, which collapses d to
    -gux).
    """
    _require_hessians(s, "adjoint")
    lam, _status = cg_solve(s.hyy, -s.guy, tol=spec.cg_tol, max_iter=spec.cg_max_iter)
    return -(s.gux + s.hxy_t(lam))


def adjoint_direction_direct(s: OracleSample, spec: DirectionSpec) -> np.ndarray:
    """Adjoint direction with the LL Hessian materialized and solved densely.

    The reference route: no iterative tolerance, but it raises on singular
    LL Hessians instead of degrading the way the CG route does.
    """
    _require_hessians(s, "adjoint")
    lam = solve_linear(s.hyy.materialize(), -s.guy)
    return -(s.gux + s.hxy_t(lam))


def bsg1_direction(s: OracleSample, spec: DirectionSpec) -> np.ndarray:
    """Rank-1 Hessian surrogate direction d = -(gux - rho * glx).

    Both LL Hessian blocks are approximated by outer products of the sampled
    LL gradients, which turns the adjoint system into a least-squares ratio
    rho = (gly . guy) / (gly . gly). A vanishing denominator (LL gradient
    numerically zero) falls back to d = -gux.
    """
    denom = float(s.gly @ s.gly)
    if denom < spec.denom_floor:
        return -s.gux.copy()
    rho = float(s.gly @ s.guy) / denom
    return -(s.gux - rho * s.glx)


def darts_probe_vector(s: OracleSample, spec: DirectionSpec) -> np.ndarray:
    """UL y-gradient, optionally curvature-scaled by 1 / ||gly||^2."""
    v = s.guy.copy()
    if spec.darts_scale_curvature:
        denom = float(s.gly @ s.gly)
        if denom >= spec.denom_floor:
            v = v / denom
    return v


def darts_core(
    problem: ProblemHandle,
    x: np.ndarray,
    y: np.ndarray,
    s_tilde: OracleSample,
    draw: Draw,
    spec: DirectionSpec,
) -> tuple[np.ndarray, int]:
    """Finite-difference direction given the base sample at (x, y_tilde).

    Probes glx at y +- eps*v around the pre-step y under the same draw, so
    probe noise is paired and cancels in the difference. Returns the
    direction and the extra points billed by the probes. When the probe
    vector underflows the floor the FD term is zero and d = -gux.
    """
    v = darts_probe_vector(s_tilde, spec)
    vnorm = float(np.linalg.norm(v))
    if vnorm < spec.denom_floor:
        return -s_tilde.gux.copy(), 0
    eps = spec.darts_fd_coeff / vnorm
    glx_plus, _ = problem.ll_grads_at(x, y + eps * v, draw)
    glx_minus, _ = problem.ll_grads_at(x, y - eps * v, draw)
    fd = (glx_plus - glx_minus) / (2.0 * eps)
    eta_eff = 1.0 if spec.darts_eta_one else spec.darts_eta
    return -(s_tilde.gux - eta_eff * fd), 2 * draw.ll_size


def darts_direction(
    problem: ProblemHandle,
    x: np.ndarray,
    y: np.ndarray,
    y_tilde: np.ndarray,
    batch: BatchSpec,
    spec: DirectionSpec,
) -> np.ndarray:
    """Standalone finite-difference direction (draws its own realization)."""
    draw = problem.draw(batch)
    s = problem.sample_at(Iterate(x, y_tilde), draw)
    d, _ = darts_core(problem, x, y, s, draw, spec)
    return d


@dataclass(frozen=True)
class LQResult:
    """Direction pair and LL multipliers of the linear-quadratic subproblem.

    `cost` is the effective UL cost vector c_hat whose signs fix dx; at an
    accurate LL solve it estimates the reduced gradient. `accessed` bills the
    gradient batches plus one LL batch for the Hessian data.
    """

    dx: np.ndarray
    dy: np.ndarray
    multipliers: np.ndarray
    cost: np.ndarray
    accessed: int
    fu_value: float


def _solve_columns(K: np.ndarray, R: np.ndarray) -> np.ndarray:
    return np.stack([solve_linear(K, R[:, j]) for j in range(R.shape[1])], axis=1)


def lq_direction(
    problem: ProblemHandle,
    x: np.ndarray,
    y: np.ndarray,
    batch: BatchSpec,
    spec: Optional[DirectionSpec] = None,
) -> LQResult:
    """Steepest-descent direction pair from the local linear-quadratic model.

    The model minimizes the linearized UL objective over ||dx||_inf <= 1
    subject to dy solving a QP in the LL Lagrangian Hessian with linearized
    constraint rows. Replacing that QP by its first-order conditions makes dy
    affine in dx (dy = M dx); substituting gives a box LP whose solution is
    the sign vector dx_i = -sign(c_hat_i), zeroed where |c_hat_i| is below
    the floor. Unconstrained lower levels reduce to the adjoint elimination,
    so dx = -sign of the sampled reduced gradient.
    """
    spec = spec or DirectionSpec(engine="lq")
    floor = spec.denom_floor
    draw = problem.draw(batch)
    cons = problem.constraints()
    n, m = problem.dims()

    if cons is None:
        if not problem.has_hessians:
            raise CapabilityError("lq on an unconstrained LL needs Hessian actions")
        s = problem.sample_at(Iterate(x, y), draw, with_hessians=True)
        Hyy = s.hyy.materialize()
        Hxy = s.hxy_t.materialize()  # (n, m) cross block
        M = -_solve_columns(Hyy, Hxy.T)  # dy = M dx
        c_hat = s.gux + M.T @ s.guy
        dx = np.where(np.abs(c_hat) <= floor, 0.0, -np.sign(c_hat))
        return LQResult(
            dx=dx,
            dy=M @ dx,
            multipliers=np.zeros(0),
            cost=c_hat,
            accessed=s.accessed,
            fu_value=s.fu_value,
        )

    s = problem.sample_at(Iterate(x, y), draw, with_hessians=False)
    data = cons.evaluate(x, y)
    p = cons.n_constraints
    Ay = data.jac_y
    Ax = data.jac_x
    if np.linalg.matrix_rank(Ay) < p:
        raise ValueError("constraint y-Jacobian is rank deficient (LICQ fails)")

    # LL multipliers of the original problem: least-squares stationarity
    # gly + Ay^T z = 0.
    z = -solve_linear(Ay @ Ay.T, Ay @ s.gly)
    grad_x_lag = s.glx + Ax.T @ z

    # Linearized rows C_y dy = C_x dx. Row 0 linearizes the LL objective
    # itself; at an exact LL solve it is a linear combination of the
    # constraint rows and must be dropped to keep the KKT system regular.
    Cy = np.vstack([s.gly[None, :], Ay])
    Cx = np.vstack([(grad_x_lag - s.glx)[None, :], -Ax])
    row0_kept = np.linalg.matrix_rank(Cy) > p
    if not row0_kept:
        Cy = Cy[1:]
        Cx = Cx[1:]
    q = Cy.shape[0]

    # Materialize the Lagrangian Hessian blocks acting on (dx, dy).
    Hyy = np.zeros((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        Hyy[:, j] = cons.lagrangian_hessian_apply(x, y, z, np.zeros(n), e)[1]
    Hyx = np.zeros((m, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        Hyx[:, j] = cons.lagrangian_hessian_apply(x, y, z, e, np.zeros(m))[1]

    K = np.zeros((m + q, m + q))
    K[:m, :m] = 2.0 * Hyy
    K[:m, m:] = Cy.T
    K[m:, :m] = Cy
    R = np.vstack([-2.0 * Hyx, Cx])
    try:
        W = _solve_columns(K, R)
    except SingularSystemError as exc:
        raise SingularSystemError("LQ KKT system singular: " + str(exc), exc.pivot) from exc
    M = W[:m, :]
    Lam = W[m:, :]

    c_hat = s.gux + M.T @ s.guy
    dx = np.where(np.abs(c_hat) <= floor, 0.0, -np.sign(c_hat))
    nu = Lam @ dx
    multipliers = nu if row0_kept else np.concatenate([[0.0], nu])
    return LQResult(
        dx=dx,
        dy=M @ dx,
        multipliers=multipliers,
        cost=c_hat,
        accessed=s.accessed + draw.ll_size,
        fu_value=s.fu_value,
    )


def direction_from_sample(s: OracleSample, spec: DirectionSpec) -> np.ndarray:
    """Dispatch for the sample-based engines (adjoint_exact, bsg_h, bsg_1)."""
    if spec.engine == "adjoint_exact":
        return adjoint_direction_direct(s, spec)
    if spec.engine == "bsg_h":
        return adjoint_direction(s, spec)
    if spec.engine == "bsg_1":
        return bsg1_direction(s, spec)
    raise ValueError(f"engine {spec.engine!r} does not derive from a bare sample")
