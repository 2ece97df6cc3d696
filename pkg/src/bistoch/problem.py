"""Problem-facing API: iterates, seeded sampling, and the bilevel interface.

A bilevel instance exposes stochastic oracles for the upper-level (UL)
objective f_u(x, y) and lower-level (LL) objective f_l(x, y), where the
reduced function is f(x) = f_u(x, y(x)) with y(x) the LL minimizer. Solvers
only ever talk to `ProblemHandle`, so new instances plug in by implementing
the abstract methods below.

Randomness discipline: one master seed spawns named, independent generator
streams ("ul", "ll", "init", "eval", ...). Stream cursors live in the
`StreamBank` owned by a single solver run, never in the problem object, so
handles stay safe for concurrent read-only use.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linalg import LinearOperator, ProjectionSet, as_vector, project


class CapabilityError(RuntimeError):
    """An engine asked a problem for data it does not advertise."""


class StreamBank:
    """Named RNG streams spawned deterministically from one master seed."""

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("master seed must be nonnegative")
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """The generator for `name`, created on first use.

        The (seed, name) pair fully determines the stream, so identical call
        sequences reproduce identical draws across runs and platforms.
        """
        gen = self._streams.get(name)
        if gen is None:
            tag = int.from_bytes(
                hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest(), "little"
            )
            gen = np.random.default_rng(np.random.SeedSequence([self.master_seed, tag]))
            self._streams[name] = gen
        return gen


@dataclass(frozen=True)
class Iterate:
    """Current UL/LL variable pair (x in R^n, y in R^m)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", as_vector(self.x, "x"))
        object.__setattr__(self, "y", as_vector(self.y, "y"))


@dataclass(frozen=True)
class BatchSpec:
    """Mini-batch sizes plus the stream bank that draws them."""

    ul_batch: int
    ll_batch: int
    streams: StreamBank

    def __post_init__(self):
        if self.ul_batch < 1 or self.ll_batch < 1:
            raise ValueError("batch sizes must be positive")


@dataclass(frozen=True)
class Draw:
    """One realization of the sampling noise, reusable across evaluations.

    Dataset-backed instances fill the index arrays; synthetic-noise instances
    fill the integer keys and regenerate their noise from them, so repeated
    evaluations under the same draw see the same realization (which is what
    makes paired finite-difference probes cancel their noise exactly).
    """

    ul_size: int
    ll_size: int
    ul_indices: Optional[np.ndarray] = None
    ll_indices: Optional[np.ndarray] = None
    ul_key: Optional[int] = None
    ll_key: Optional[int] = None


@dataclass
class OracleSample:
    """Stochastic gradients (and optional Hessian actions) at one iterate.

    gux, guy are UL-objective gradients in x and y; glx, gly the LL ones.
    hyy is the LL Hessian action in y (R^m -> R^m) and hxy_t the cross block
    action v -> (d^2 f_l / dx dy) v (R^m -> R^n); both None unless requested
    from a Hessian-capable problem. `accessed` is the number of data points
    this sample consumed (Hessian-bearing samples bill their LL batch once
    more, on top of the UL and LL gradient batches).
    """

    gux: np.ndarray
    guy: np.ndarray
    glx: np.ndarray
    gly: np.ndarray
    fu_value: float
    fl_value: float
    hyy: Optional[LinearOperator] = None
    hxy_t: Optional[LinearOperator] = None
    accessed: int = 0


@dataclass(frozen=True)
class ConstraintData:
    """Equality-constraint values and Jacobians at a point."""

    values: np.ndarray
    jac_x: np.ndarray
    jac_y: np.ndarray


class ConstraintSet(ABC):
    """Equality constraints f_i(x, y) = 0 attached to a lower level."""

    @property
    @abstractmethod
    def n_constraints(self) -> int: ...

    @abstractmethod
    def evaluate(self, x: np.ndarray, y: np.ndarray) -> ConstraintData: ...

    @abstractmethod
    def lagrangian_hessian_apply(
        self, x: np.ndarray, y: np.ndarray, z: np.ndarray, dx: np.ndarray, dy: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Action of the LL Lagrangian Hessian on (dx, dy), split by block."""


class ProblemHandle(ABC):
    """Abstract bilevel instance; solvers depend only on this surface."""

    @abstractmethod
    def dims(self) -> tuple[int, int]:
        """(n, m): UL and LL variable dimensions."""

    @abstractmethod
    def dataset_sizes(self) -> tuple[int, int]:
        """(N_ul, N_ll): sampling-population sizes batches are clamped to."""

    @property
    def has_hessians(self) -> bool:
        return False

    @abstractmethod
    def draw(self, batch: BatchSpec) -> Draw:
        """Advance the bank's "ul"/"ll" streams and freeze one realization."""

    @abstractmethod
    def sample_at(self, it: Iterate, draw: Draw, with_hessians: bool = False) -> OracleSample:
        """Deterministic oracle evaluation under a frozen draw."""

    def sample(self, it: Iterate, batch: BatchSpec, with_hessians: bool = False) -> OracleSample:
        return self.sample_at(it, self.draw(batch), with_hessians=with_hessians)

    @abstractmethod
    def ll_grads_at(self, x: np.ndarray, y: np.ndarray, draw: Draw) -> tuple[np.ndarray, np.ndarray]:
        """(glx, gly) under a frozen draw; bills draw.ll_size points."""

    @abstractmethod
    def full_draw(self) -> Draw:
        """The deterministic full-data (or noise-free) realization."""

    def ll_sg_run(
        self,
        x: np.ndarray,
        y0: np.ndarray,
        n_steps: int,
        step_at: Callable[[int], float],
        batch: BatchSpec,
        harmonic_gamma: Optional[float] = None,
    ) -> tuple[np.ndarray, int]:
        """Run n_steps of projected SG on the LL from y0 at fixed x.

        Step i (1-based) uses stepsize step_at(i) and a fresh draw. Returns
        (final y, accessed points). `harmonic_gamma` is set by the caller when
        the schedule is exactly gamma/i, letting instances swap in an exact
        vectorized simulation of the recursion when their noise model admits
        one; the generic loop ignores it.
        """
        y = as_vector(y0, "y0").copy()
        proj = self.projection_y(x)
        accessed = 0
        for i in range(1, n_steps + 1):
            d = self.draw(batch)
            _, gly = self.ll_grads_at(x, y, d)
            y = y - step_at(i) * gly
            if proj.variant != "all":
                y = project(y, proj)
            accessed += d.ll_size
        return y, accessed

    @abstractmethod
    def ul_value_full(self, it: Iterate) -> float: ...

    @abstractmethod
    def ll_value_full(self, it: Iterate) -> float: ...

    def eval_values(self, it: Iterate, streams: StreamBank) -> tuple[float, float]:
        """(UL, LL) objective estimates for trace records; full data unless
        an instance overrides with designated evaluation batches."""
        return self.ul_value_full(it), self.ll_value_full(it)

    @abstractmethod
    def ll_solve_accurate(self, x: np.ndarray, tol: float) -> np.ndarray:
        """y(x) to gradient tolerance tol (exact where closed forms exist)."""

    def projection_x(self) -> ProjectionSet:
        return ProjectionSet.all_space()

    def projection_y(self, x: np.ndarray) -> ProjectionSet:
        return ProjectionSet.all_space()

    def constraints(self) -> Optional[ConstraintSet]:
        return None

    def initial_iterate(self, streams: StreamBank) -> Iterate:
        n, m = self.dims()
        return Iterate(np.zeros(n), np.zeros(m))

    def clamp_batch(self, ul_batch: int, ll_batch: int) -> tuple[int, int]:
        nu, nl = self.dataset_sizes()
        return max(1, min(ul_batch, nu)), max(1, min(ll_batch, nl))


@dataclass
class AccessCounter:
    """Running total of accessed data points, the cost axis of all traces."""

    total: int = 0

    def add(self, n: int) -> "AccessCounter":
        if n < 0:
            raise ValueError("accessed increments are nonnegative")
        self.total += int(n)
        return self

    def add_sample(self, sample: OracleSample) -> "AccessCounter":
        return self.add(sample.accessed)


def true_f(problem: ProblemHandle, x: np.ndarray, tol: float = 1e-8) -> float:
    """Reduced objective f(x) = f_u(x, y(x)) via an accurate LL solve."""
    x = as_vector(x, "x")
    y = problem.ll_solve_accurate(x, tol)
    return problem.ul_value_full(Iterate(x, y))
