"""Outer solver loops, stepsize schedules, and inner lower-level policies.

Both solvers run the same skeleton per iteration k = 1, 2, ...:

    1. move the LL variable toward y(x_k) (inner policy),
    2. build a direction from stochastic oracles at the resulting pair,
    3. step the UL variable and project onto its feasible set.

`run_bsg` covers the adjoint/rank-1/LQ engines; `run_darts` is the
finite-difference two-timescale loop, which interleaves the levels in a
fixed order so its draws pair up. Traces record the true reduced objective on
an eval cadence, with cumulative accessed-data accounting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .directions import (
    DirectionSpec,
    darts_core,
    direction_from_sample,
    lq_direction,
)
from .linalg import project
from .problem import (
    AccessCounter,
    BatchSpec,
    CapabilityError,
    Iterate,
    ProblemHandle,
    StreamBank,
    true_f,
)

SCHEDULE_KINDS = ("fixed", "harmonic", "strongly_convex", "sqrt_decay")
INNER_KINDS = ("one_step", "inc_acc", "k_squared", "accurate")
SAMPLING_KINDS = ("fixed", "dynamic")


@dataclass(frozen=True)
class StepsizeSchedule:
    """Iteration-indexed stepsize rule; iterations are 1-based."""

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if self.param <= 0:
            raise ValueError("schedule parameter must be positive")

    @staticmethod
    def fixed(alpha: float) -> "StepsizeSchedule":
        return StepsizeSchedule("fixed", alpha)

    @staticmethod
    def harmonic(c0: float) -> "StepsizeSchedule":
        """c0 / k."""
        return StepsizeSchedule("harmonic", c0)

    @staticmethod
    def strongly_convex(c: float) -> "StepsizeSchedule":
        """2 / (c (k+1)), the schedule behind the 1/k rate guarantee."""
        return StepsizeSchedule("strongly_convex", c)

    @staticmethod
    def sqrt_decay(alpha_bar: float) -> "StepsizeSchedule":
        """alpha_bar / sqrt(k), the schedule behind the 1/sqrt(k) rate."""
        return StepsizeSchedule("sqrt_decay", alpha_bar)

    def at(self, k: int) -> float:
        if k < 1:
            raise ValueError("stepsize index starts at 1")
        if self.kind == "fixed":
            return self.param
        if self.kind == "harmonic":
            return self.param / k
        if self.kind == "strongly_convex":
            return 2.0 / (self.param * (k + 1))
        return self.param / np.sqrt(k)


@dataclass(frozen=True)
class InnerPolicy:
    """How far each outer iteration pushes the LL variable toward y(x).

    one_step: a single SG step at the schedule's value for k.
    inc_acc: a growing number of SG steps; the count bumps by one whenever
        consecutive UL objective estimates differ by less than `threshold`.
    k_squared: k^2 SG steps with stepsizes gamma/i, the inner schedule whose
        error contracts like 1/k^2 when gamma*mu >= 1/2.
    accurate: an exact/deterministic solve to tolerance `tol` (reference
        runs; bills no sampled points).

    hotstart starts each inner run from the previous y_tilde instead of y0.
    full_batch_objective makes inc_acc compare full-data UL values; the
    default compares the mini-batch estimates, which costs nothing extra.
    """

    kind: str
    ll_stepsize: Optional[StepsizeSchedule] = None
    threshold: float = 0.0
    gamma: float = 1.0
    tol: float = 1e-8
    hotstart: bool = True
    full_batch_objective: bool = False

    def __post_init__(self):
        if self.kind not in INNER_KINDS:
            raise ValueError(f"inner policy kind must be one of {INNER_KINDS}")
        if self.kind in ("one_step", "inc_acc") and self.ll_stepsize is None:
            raise ValueError(f"{self.kind} needs an ll_stepsize schedule")
        if self.kind == "inc_acc" and self.threshold <= 0:
            raise ValueError("inc_acc needs a positive threshold")
        if self.kind == "k_squared" and self.gamma <= 0:
            raise ValueError("k_squared needs a positive gamma")
        if self.kind == "accurate" and self.tol <= 0:
            raise ValueError("accurate needs a positive tol")

    @staticmethod
    def one_step(ll_stepsize: StepsizeSchedule, hotstart: bool = True) -> "InnerPolicy":
        return InnerPolicy("one_step", ll_stepsize=ll_stepsize, hotstart=hotstart)

    @staticmethod
    def inc_acc(
        ll_stepsize: StepsizeSchedule,
        threshold: float,
        hotstart: bool = True,
        full_batch_objective: bool = False,
    ) -> "InnerPolicy":
        return InnerPolicy(
            "inc_acc",
            ll_stepsize=ll_stepsize,
            threshold=threshold,
            hotstart=hotstart,
            full_batch_objective=full_batch_objective,
        )

    @staticmethod
    def k_squared(gamma: float, hotstart: bool = True) -> "InnerPolicy":
        return InnerPolicy("k_squared", gamma=gamma, hotstart=hotstart)

    @staticmethod
    def accurate(tol: float = 1e-8) -> "InnerPolicy":
        return InnerPolicy("accurate", tol=tol)


def inc_acc_update(steps: int, fu_prev: float, fu_cur: float, threshold: float) -> int:
    """Bump the inner step count when the UL objective has flattened."""
    if steps < 1:
        raise ValueError("step count is at least 1")
    if abs(fu_cur - fu_prev) < threshold:
        return steps + 1
    return steps


def dynamic_batch_size(c_d: float, alpha: float, sigma: float, q: float, cap: int) -> int:
    """Smallest batch b with sigma*sqrt(q)/sqrt(b) <= c_d * alpha, clamped.

    ceil((sigma sqrt(q) / (c_d alpha))^2), kept within [1, cap]. The clamp to
    cap can break the inequality; callers who need it exactly must choose a
    non-binding cap.
    """
    if c_d <= 0 or alpha <= 0 or sigma < 0 or q <= 0 or cap < 1:
        raise ValueError("dynamic sampling needs c_d, alpha, q > 0, sigma >= 0, cap >= 1")
    raw = int(np.ceil((sigma * np.sqrt(q) / (c_d * alpha)) ** 2))
    return int(min(max(raw, 1), cap))


@dataclass(frozen=True)
class SamplingPolicy:
    """Fixed batch sizes, or dynamic sizes that shrink the gradient noise
    proportionally to the current stepsize."""

    kind: str
    ul_batch: int = 1
    ll_batch: int = 1
    c_d: float = 1.0
    sigma: float = 1.0
    q: float = 1.0
    cap: int = 2**20

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise ValueError(f"sampling kind must be one of {SAMPLING_KINDS}")
        if self.kind == "fixed" and (self.ul_batch < 1 or self.ll_batch < 1):
            raise ValueError("fixed sampling needs positive batch sizes")

    @staticmethod
    def fixed(ul_batch: int, ll_batch: int) -> "SamplingPolicy":
        return SamplingPolicy("fixed", ul_batch=ul_batch, ll_batch=ll_batch)

    @staticmethod
    def dynamic(c_d: float, sigma: float, q: float, cap: int = 2**20) -> "SamplingPolicy":
        return SamplingPolicy("dynamic", c_d=c_d, sigma=sigma, q=q, cap=cap)

    def batch_sizes(self, alpha: float) -> tuple[int, int]:
        if self.kind == "fixed":
            return self.ul_batch, self.ll_batch
        b = dynamic_batch_size(self.c_d, alpha, self.sigma, self.q, self.cap)
        return b, b


@dataclass(frozen=True)
class SolverConfig:
    direction: DirectionSpec
    ul_stepsize: StepsizeSchedule
    inner: InnerPolicy
    sampling: SamplingPolicy
    max_iters: int
    master_seed: int = 0
    eval_every: int = 10
    eval_tol: float = 1e-8
    record_grad_norm: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.eval_tol <= 0:
            raise ValueError("eval_tol must be positive")


@dataclass(frozen=True)
class TraceRecord:
    k: int
    accessed: int
    wall_seconds: float
    f_true: float
    ul_value_eval: float
    ll_value_eval: float
    grad_norm_fd: Optional[float] = None


@dataclass
class RunTrace:
    """Eval-cadence records of one solver run (k = 0 is the initial point)."""

    records: list[TraceRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def ks(self) -> np.ndarray:
        return np.array([r.k for r in self.records], dtype=np.int64)

    @property
    def f_true(self) -> np.ndarray:
        return np.array([r.f_true for r in self.records])

    @property
    def accessed(self) -> np.ndarray:
        return np.array([r.accessed for r in self.records], dtype=np.int64)

    @property
    def ul_values(self) -> np.ndarray:
        return np.array([r.ul_value_eval for r in self.records])

    @property
    def final(self) -> TraceRecord:
        if not self.records:
            raise ValueError("empty trace")
        return self.records[-1]


def fd_reduced_gradient(
    problem: ProblemHandle, x: np.ndarray, tol: float = 1e-10, h: float = 1e-5
) -> np.ndarray:
    """Central differences of the reduced objective x -> f_u(x, y(x))."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * (1.0 + abs(float(x[i])))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (true_f(problem, x + e, tol) - true_f(problem, x - e, tol)) / (2.0 * step)
    return g


def inner_solve(
    problem: ProblemHandle,
    x: np.ndarray,
    y_start: np.ndarray,
    policy: InnerPolicy,
    k: int,
    batch: BatchSpec,
    inc_acc_steps: int = 1,
) -> tuple[np.ndarray, int]:
    """Advance the LL variable for outer iteration k; returns (y_tilde, accessed)."""
    if k < 1:
        raise ValueError("outer iteration index starts at 1")
    if policy.kind == "accurate":
        return problem.ll_solve_accurate(x, policy.tol), 0
    if policy.kind == "k_squared":
        gamma = policy.gamma
        return problem.ll_sg_run(
            x, y_start, k * k, lambda i: gamma / i, batch, harmonic_gamma=gamma
        )
    beta = policy.ll_stepsize.at(k)
    n_steps = 1 if policy.kind == "one_step" else inc_acc_steps
    return problem.ll_sg_run(x, y_start, n_steps, lambda i: beta, batch)


def _clamped_batch(problem: ProblemHandle, sampling: SamplingPolicy, alpha: float,
                   streams: StreamBank) -> BatchSpec:
    bu, bl = sampling.batch_sizes(alpha)
    bu, bl = problem.clamp_batch(bu, bl)
    return BatchSpec(ul_batch=bu, ll_batch=bl, streams=streams)


def _record(
    trace: RunTrace,
    problem: ProblemHandle,
    config: SolverConfig,
    streams: StreamBank,
    k: int,
    counter: AccessCounter,
    start_time: float,
    x: np.ndarray,
    y: np.ndarray,
) -> None:
    ft = true_f(problem, x, config.eval_tol)
    ul_eval, ll_eval = problem.eval_values(Iterate(x, y), streams)
    gn = None
    if config.record_grad_norm:
        gn = float(np.linalg.norm(fd_reduced_gradient(problem, x, config.eval_tol)))
    trace.records.append(
        TraceRecord(
            k=k,
            accessed=counter.total,
            wall_seconds=time.perf_counter() - start_time,
            f_true=ft,
            ul_value_eval=ul_eval,
            ll_value_eval=ll_eval,
            grad_norm_fd=gn,
        )
    )


def run_bsg(problem: ProblemHandle, config: SolverConfig) -> RunTrace:
    """Projected bilevel stochastic descent (adjoint, rank-1, or LQ engine).

    Per iteration: inner policy moves y, the engine builds d from a fresh
    sample at (x_k, y_tilde_k), then x_{k+1} = P_X(x_k + alpha_k d).
    Capability mismatches (Hessian-free problem with a Hessian-hungry
    engine) fail before iteration 1.
    """
    engine = config.direction.engine
    if engine == "darts":
        raise ValueError("darts runs through run_darts")
    needs_hessians = engine in ("adjoint_exact", "bsg_h") or (
        engine == "lq" and problem.constraints() is None
    )
    if needs_hessians and not problem.has_hessians:
        raise CapabilityError(f"{engine} needs Hessian actions this problem does not advertise")

    streams = StreamBank(config.master_seed)
    it0 = problem.initial_iterate(streams)
    proj_x = problem.projection_x()
    x = project(it0.x, proj_x)
    y_init = it0.y.copy()
    y_tilde = it0.y.copy()

    counter = AccessCounter()
    trace = RunTrace(meta={"engine": engine, "seed": config.master_seed})
    start = time.perf_counter()
    _record(trace, problem, config, streams, 0, counter, start, x, y_tilde)

    inc_steps = 1
    fu_prev: Optional[float] = None
    for k in range(1, config.max_iters + 1):
        alpha = config.ul_stepsize.at(k)
        batch = _clamped_batch(problem, config.sampling, alpha, streams)

        y_start = y_tilde if config.inner.hotstart else y_init
        y_tilde, inner_accessed = inner_solve(
            problem, x, y_start, config.inner, k, batch, inc_steps
        )
        counter.add(inner_accessed)

        if engine == "lq":
            res = lq_direction(problem, x, y_tilde, batch, config.direction)
            d = res.dx
            counter.add(res.accessed)
            fu_cur = res.fu_value
        else:
            s = problem.sample(Iterate(x, y_tilde), batch, with_hessians=needs_hessians)
            d = direction_from_sample(s, config.direction)
            counter.add_sample(s)
            fu_cur = s.fu_value

        if config.inner.kind == "inc_acc":
            if config.inner.full_batch_objective:
                fu_cur = problem.ul_value_full(Iterate(x, y_tilde))
            if fu_prev is not None:
                inc_steps = inc_acc_update(inc_steps, fu_prev, fu_cur, config.inner.threshold)
            fu_prev = fu_cur

        x = project(x + alpha * d, proj_x)
        if k % config.eval_every == 0:
            _record(trace, problem, config, streams, k, counter, start, x, y_tilde)
    trace.meta["x_final"] = x.copy()
    trace.meta["y_final"] = y_tilde.copy()
    return trace


def run_darts(problem: ProblemHandle, config: SolverConfig) -> RunTrace:
    """Two-timescale finite-difference descent, unconstrained levels only.

    Per iteration k (one shared draw pairs every evaluation):

        y_tilde = y - eta_k * gly(x, y)
        x      += alpha_k * d,   d from the paired FD probes at y +- eps*v
        y       = y_tilde

    The probe direction v is guy(x, y_tilde), optionally curvature-scaled;
    the FD term is weighted by eta_k (or 1 under darts_eta_one).
    """
    if config.direction.engine != "darts":
        raise ValueError("run_darts needs a darts direction spec")
    if problem.constraints() is not None:
        raise CapabilityError("darts supports unconstrained lower levels only")
    if problem.projection_x().variant != "all":
        raise CapabilityError("darts supports unconstrained upper levels only")
    if config.inner.kind != "one_step":
        raise ValueError("darts pairs with the one_step inner policy")

    streams = StreamBank(config.master_seed)
    it0 = problem.initial_iterate(streams)
    x = it0.x.copy()
    y = it0.y.copy()

    counter = AccessCounter()
    trace = RunTrace(meta={"engine": "darts", "seed": config.master_seed})
    start = time.perf_counter()
    _record(trace, problem, config, streams, 0, counter, start, x, y)

    for k in range(1, config.max_iters + 1):
        alpha = config.ul_stepsize.at(k)
        eta = config.inner.ll_stepsize.at(k)
        batch = _clamped_batch(problem, config.sampling, alpha, streams)
        draw = problem.draw(batch)

        _, gly = problem.ll_grads_at(x, y, draw)
        counter.add(draw.ll_size)
        y_tilde = y - eta * gly

        s = problem.sample_at(Iterate(x, y_tilde), draw)
        counter.add_sample(s)
        spec_k = replace(config.direction, darts_eta=eta)
        d, probe_accessed = darts_core(problem, x, y, s, draw, spec_k)
        counter.add(probe_accessed)

        x = x + alpha * d
        y = y_tilde
        if k % config.eval_every == 0:
            _record(trace, problem, config, streams, k, counter, start, x, y)
    trace.meta["x_final"] = x.copy()
    trace.meta["y_final"] = y.copy()
    return trace
