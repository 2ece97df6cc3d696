"""Dense linear algebra helpers shared by the direction engines and solvers.

Everything here works on 1-D float64 numpy arrays. Operators are given by
callbacks so instances can expose Hessian actions without materializing
matrices; the direct solver and the LQ elimination materialize on their own
when they need to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# Curvature p^T H p at or below NPC_RTOL * ||p||^2 counts as non-positive.
NPC_RTOL = 1e-12
# Scaled pivots at or below this magnitude make a system singular-to-tolerance.
PIVOT_RTOL = 1e-12

CG_CONVERGED = "converged"
CG_MAX_ITER = "max_iter"
CG_NONPOSITIVE_CURVATURE = "nonpositive_curvature"


class SingularSystemError(RuntimeError):
    """Raised when elimination meets a pivot that is zero to tolerance."""

    def __init__(self, message: str, pivot: float = 0.0):
        super().__init__(message)
        self.pivot = pivot


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and convert to a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass
class LinearOperator:
    """Matrix-free linear map given by an apply callback.

    `in_dim` and `out_dim` may differ (cross-derivative blocks are
    rectangular); square operators may be built with `out_dim` omitted.
    """

    in_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    out_dim: int = -1

    def __post_init__(self):
        if self.out_dim < 0:
            self.out_dim = self.in_dim
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("operator dimensions must be positive")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.in_dim,):
            raise ValueError(f"operand shape {v.shape} != ({self.in_dim},)")
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.out_dim,):
            raise ValueError("operator returned wrong shape")
        return out

    def materialize(self) -> np.ndarray:
        """Dense (out_dim, in_dim) matrix, one apply per basis vector."""
        cols = [self(e) for e in np.eye(self.in_dim)]
        return np.stack(cols, axis=1)


def matrix_operator(mat: np.ndarray) -> LinearOperator:
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("matrix_operator needs a 2-D array")
    return LinearOperator(in_dim=m.shape[1], out_dim=m.shape[0], apply=lambda v: m @ v)


def cg_solve(
    H: LinearOperator,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: Optional[int] = None,
) -> tuple[np.ndarray, str]:
    """Conjugate gradients on H x = rhs with non-positive-curvature detection.

    Returns (solution, status). Status is one of:

    * ``converged``: true residual ||H x - rhs|| <= tol * max(1, ||rhs||);
    * ``nonpositive_curvature``: a search direction p hit
      p^T H p <= 1e-12 * ||p||^2; the iterate from before that direction is
      returned (the zero vector if the very first direction is bad);
    * ``max_iter``: budget exhausted.
    """
    if H.in_dim != H.out_dim:
        raise ValueError("cg_solve needs a square operator")
    b = as_vector(rhs, "rhs")
    if b.shape != (H.in_dim,):
        raise ValueError("rhs dimension does not match operator")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = H.in_dim
    budget = 2 * n if max_iter is None else int(max_iter)
    if budget < 1:
        raise ValueError("max_iter must be at least 1")

    thresh = tol * max(1.0, float(np.linalg.norm(b)))
    x = np.zeros(n)
    r = b.copy()
    if np.linalg.norm(r) <= thresh:
        return x, CG_CONVERGED
    p = r.copy()
    rr = float(r @ r)

    for _ in range(budget):
        Hp = H(p)
        pHp = float(p @ Hp)
        if pHp <= NPC_RTOL * float(p @ p):
            return x, CG_NONPOSITIVE_CURVATURE
        step = rr / pHp
        x = x + step * p
        r = r - step * Hp
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= thresh:
            # Recursive residual can drift; confirm against the real one.
            if np.linalg.norm(b - H(x)) <= thresh:
                return x, CG_CONVERGED
        p = r + (rr_new / rr) * p
        rr = rr_new

    return x, CG_MAX_ITER


def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a dense square system by elimination with scaled partial pivoting.

    Raises SingularSystemError when the best available pivot is zero relative
    to its row scale (threshold 1e-12), carrying the offending pivot value.
    """
    A = np.array(A, dtype=np.float64)
    x = as_vector(b, "b").copy()
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    n = A.shape[0]
    if x.shape != (n,):
        raise ValueError("b dimension does not match A")
    if not np.all(np.isfinite(A)):
        raise ValueError("A has non-finite entries")

    scale = np.max(np.abs(A), axis=1)
    if np.any(scale == 0.0):
        raise SingularSystemError("matrix has an all-zero row", pivot=0.0)

    perm = np.arange(n)
    for col in range(n):
        sub = np.abs(A[perm[col:], col]) / scale[perm[col:]]
        best = int(np.argmax(sub))
        if sub[best] <= PIVOT_RTOL:
            raise SingularSystemError(
                f"singular to tolerance at column {col}: scaled pivot {sub[best]:.3e}",
                pivot=float(sub[best]),
            )
        perm[[col, col + best]] = perm[[col + best, col]]
        piv_row = perm[col]
        below = perm[col + 1 :]
        mult = A[below, col] / A[piv_row, col]
        A[below, col:] -= np.outer(mult, A[piv_row, col:])
        x[below] -= mult * x[piv_row]

    out = np.zeros(n)
    for col in range(n - 1, -1, -1):
        row = perm[col]
        out[col] = (x[row] - A[row, col + 1 :] @ out[col + 1 :]) / A[row, col]
    return out


@dataclass(frozen=True)
class ProjectionSet:
    """Closed convex set with a cheap Euclidean projection.

    Variants: ``all`` (whole space), ``box`` (componentwise bounds), ``ball``
    (Euclidean ball), ``affine`` ({v : B v = c}, used for linearly constrained
    lower levels).
    """

    variant: str
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    mat: Optional[np.ndarray] = None
    rhs: Optional[np.ndarray] = None

    @staticmethod
    def all_space() -> "ProjectionSet":
        return ProjectionSet(variant="all")

    @staticmethod
    def box(lo, hi) -> "ProjectionSet":
        lo = as_vector(lo, "lo")
        hi = as_vector(hi, "hi")
        if lo.shape != hi.shape:
            raise ValueError("box bounds must share a shape")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        return ProjectionSet(variant="box", lo=lo, hi=hi)

    @staticmethod
    def ball(center, radius: float) -> "ProjectionSet":
        center = as_vector(center, "center")
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return ProjectionSet(variant="ball", center=center, radius=float(radius))

    @staticmethod
    def affine(mat, rhs) -> "ProjectionSet":
        mat = np.asarray(mat, dtype=np.float64)
        rhs = as_vector(rhs, "rhs")
        if mat.ndim != 2 or mat.shape[0] != rhs.shape[0]:
            raise ValueError("affine set needs mat with one row per rhs entry")
        return ProjectionSet(variant="affine", mat=mat, rhs=rhs)


def project(p: np.ndarray, s: ProjectionSet) -> np.ndarray:
    """Euclidean projection of p onto s."""
    p = as_vector(p, "point")
    if s.variant == "all":
        return p.copy()
    if s.variant == "box":
        if p.shape != s.lo.shape:
            raise ValueError("point dimension does not match box")
        return np.clip(p, s.lo, s.hi)
    if s.variant == "ball":
        if p.shape != s.center.shape:
            raise ValueError("point dimension does not match ball")
        offset = p - s.center
        dist = float(np.linalg.norm(offset))
        if dist <= s.radius:
            return p.copy()
        return s.center + offset * (s.radius / dist)
    if s.variant == "affine":
        if p.shape[0] != s.mat.shape[1]:
            raise ValueError("point dimension does not match affine set")
        # p - B^T (B B^T)^{-1} (B p - c); small constraint counts only.
        gram = s.mat @ s.mat.T
        resid = s.mat @ p - s.rhs
        try:
            mult = solve_linear(gram, resid)
        except SingularSystemError as exc:
            raise SingularSystemError(
                "affine projection needs independent rows: " + str(exc), exc.pivot
            ) from exc
        return p - s.mat.T @ mult
    raise ValueError(f"unknown projection variant {s.variant!r}")
