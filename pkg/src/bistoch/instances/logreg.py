"""Bilevel logistic regression on a superset/subset split.

Two hyperplanes are trained jointly: the UL variables x = (c, b) and the LL
variables y = (c_bar, b_bar), both in R^(d+1) with the bias folded in as a
trailing coordinate. With ell the logistic loss and T2 a subset of T1,

    UL: f_u(x, y) = mean_{T1} ell(.; y) + mean_{T2} ell(.; x)
    LL: f_l(x, y) = mean_{T2} ell(.; y) + (lam/2) ||y - x||^2

so the LL trains its own hyperplane on the subset, tethered to the UL one.
``superset_on_ul=True`` swaps the UL reading to mean_{T1} ell(.; x) +
mean_{T2} ell(.; y) for comparison; the LL is unchanged either way.

Sampling draws UL batches from T1 and LL batches from T2. The UL subset term
reuses the LL batch rows (they are already being paid for in the same draw),
so one sample bills exactly ul_batch + ll_batch points, plus one more LL
batch when Hessian actions are requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from ..linalg import LinearOperator
from ..problem import BatchSpec, Draw, Iterate, OracleSample, ProblemHandle


@dataclass(frozen=True)
class LabeledData:
    """Rows (features, label) with labels in {-1, +1}."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.features, dtype=np.float64)
        u = np.asarray(self.labels, dtype=np.float64)
        if Z.ndim != 2 or u.ndim != 1 or Z.shape[0] != u.shape[0]:
            raise ValueError("features must be (N, d) with one label per row")
        if not np.all(np.isin(u, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "features", Z)
        object.__setattr__(self, "labels", u)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]


def _loss_terms(ZA: np.ndarray, u: np.ndarray, w: np.ndarray):
    """Per-row logistic losses and the margin s = u * (w . z_aug)."""
    s = u * (ZA @ w)
    return np.logaddexp(0.0, -s), s


def _mean_loss(ZA, u, w) -> float:
    return float(np.mean(_loss_terms(ZA, u, w)[0]))


def _mean_grad(ZA, u, w) -> np.ndarray:
    # d/dw mean log(1 + exp(-u w.z)) = -mean u sigmoid(-s) z
    s = u * (ZA @ w)
    return -(ZA.T @ (u * expit(-s))) / ZA.shape[0]


def _mean_hess_apply(ZA, u, w, v) -> np.ndarray:
    s = u * (ZA @ w)
    weights = expit(s) * expit(-s)  # sigma(1 - sigma), label sign squares away
    return (ZA.T @ (weights * (ZA @ v))) / ZA.shape[0]


def _mean_hess(ZA, u, w) -> np.ndarray:
    s = u * (ZA @ w)
    weights = expit(s) * expit(-s)
    return (ZA.T * weights) @ ZA / ZA.shape[0]


class LogRegBilevel(ProblemHandle):
    """See module docstring. Hessian-capable (analytic sigma(1-sigma) HVPs)."""

    def __init__(
        self,
        data: LabeledData,
        n_t1: int,
        n_t2: int,
        lam_reg: float = 0.1,
        superset_on_ul: bool = False,
        x0: Optional[np.ndarray] = None,
        y0: Optional[np.ndarray] = None,
    ):
        if not (1 <= n_t2 <= n_t1 <= data.n_rows):
            raise ValueError("need 1 <= n_t2 <= n_t1 <= rows")
        if lam_reg <= 0:
            raise ValueError("lam_reg must be positive")
        self.lam = float(lam_reg)
        self.superset_on_ul = bool(superset_on_ul)
        self.n_t1 = int(n_t1)
        self.n_t2 = int(n_t2)

        Z = data.features[:n_t1]
        self._ZA = np.hstack([Z, np.ones((n_t1, 1))])  # bias column folded in
        self._u = data.labels[:n_t1].copy()
        self._dim = self._ZA.shape[1]

        self.x0 = np.zeros(self._dim) if x0 is None else np.asarray(x0, float)
        self.y0 = np.zeros(self._dim) if y0 is None else np.asarray(y0, float)
        if self.x0.shape != (self._dim,) or self.y0.shape != (self._dim,):
            raise ValueError("x0/y0 must have dimension n_features + 1")

    # -- structure ---------------------------------------------------------

    def dims(self) -> tuple[int, int]:
        return self._dim, self._dim

    def dataset_sizes(self) -> tuple[int, int]:
        return self.n_t1, self.n_t2

    @property
    def has_hessians(self) -> bool:
        return True

    def initial_iterate(self, streams) -> Iterate:
        return Iterate(self.x0.copy(), self.y0.copy())

    # -- sampling ----------------------------------------------------------

    def draw(self, batch: BatchSpec) -> Draw:
        bu, bl = self.clamp_batch(batch.ul_batch, batch.ll_batch)
        ul_idx = batch.streams.stream("ul").choice(self.n_t1, size=bu, replace=False)
        ll_idx = batch.streams.stream("ll").choice(self.n_t2, size=bl, replace=False)
        return Draw(ul_size=bu, ll_size=bl, ul_indices=ul_idx, ll_indices=ll_idx)

    def full_draw(self) -> Draw:
        return Draw(
            ul_size=0,
            ll_size=0,
            ul_indices=np.arange(self.n_t1),
            ll_indices=np.arange(self.n_t2),
        )

    def _rows(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self._ZA[idx], self._u[idx]

    def sample_at(self, it: Iterate, draw: Draw, with_hessians: bool = False) -> OracleSample:
        x, y = it.x, it.y
        Zu, uu = self._rows(draw.ul_indices)
        Zl, ul = self._rows(draw.ll_indices)
        prox = y - x

        if self.superset_on_ul:
            gux = _mean_grad(Zu, uu, x)
            guy = _mean_grad(Zl, ul, y)
            fu = _mean_loss(Zu, uu, x) + _mean_loss(Zl, ul, y)
        else:
            gux = _mean_grad(Zl, ul, x)
            guy = _mean_grad(Zu, uu, y)
            fu = _mean_loss(Zu, uu, y) + _mean_loss(Zl, ul, x)

        sample = OracleSample(
            gux=gux,
            guy=guy,
            glx=-self.lam * prox,
            gly=_mean_grad(Zl, ul, y) + self.lam * prox,
            fu_value=fu,
            fl_value=_mean_loss(Zl, ul, y) + 0.5 * self.lam * float(prox @ prox),
            accessed=draw.ul_size + draw.ll_size,
        )
        if with_hessians:
            lam, dim = self.lam, self._dim
            sample.hyy = LinearOperator(
                in_dim=dim,
                apply=lambda v: _mean_hess_apply(Zl, ul, y, v) + lam * v,
            )
            sample.hxy_t = LinearOperator(in_dim=dim, apply=lambda v: -lam * v)
            sample.accessed += draw.ll_size
        return sample

    def ll_grads_at(self, x, y, draw: Draw) -> tuple[np.ndarray, np.ndarray]:
        Zl, ul = self._rows(draw.ll_indices)
        prox = y - x
        return -self.lam * prox, _mean_grad(Zl, ul, y) + self.lam * prox

    # -- full-data quantities ------------------------------------------------

    def ul_value_full(self, it: Iterate) -> float:
        Zl, ul = self._ZA[: self.n_t2], self._u[: self.n_t2]
        if self.superset_on_ul:
            return _mean_loss(self._ZA, self._u, it.x) + _mean_loss(Zl, ul, it.y)
        return _mean_loss(self._ZA, self._u, it.y) + _mean_loss(Zl, ul, it.x)

    def ll_value_full(self, it: Iterate) -> float:
        Zl, ul = self._ZA[: self.n_t2], self._u[: self.n_t2]
        prox = it.y - it.x
        return _mean_loss(Zl, ul, it.y) + 0.5 * self.lam * float(prox @ prox)

    def ll_solve_accurate(self, x: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        """Damped Newton on the strongly convex LL objective."""
        Zl, ul = self._ZA[: self.n_t2], self._u[: self.n_t2]
        lam = self.lam

        def grad(y):
            return _mean_grad(Zl, ul, y) + lam * (y - x)

        def value(y):
            return _mean_loss(Zl, ul, y) + 0.5 * lam * float((y - x) @ (y - x))

        y = x.astype(np.float64).copy()
        for _ in range(100):
            g = grad(y)
            if np.linalg.norm(g) <= tol:
                break
            H = _mean_hess(Zl, ul, y) + lam * np.eye(self._dim)
            step = np.linalg.solve(H, -g)
            t, v0, slope = 1.0, value(y), float(g @ step)
            while t > 1e-8 and value(y + t * step) > v0 + 1e-4 * t * slope:
                t *= 0.5
            y = y + t * step
        return y

    def train_accuracy(self, w: np.ndarray, subset_only: bool = False) -> float:
        """Fraction of correctly classified rows under hyperplane w."""
        ZA = self._ZA[: self.n_t2] if subset_only else self._ZA
        u = self._u[: self.n_t2] if subset_only else self._u
        return float(np.mean(np.sign(ZA @ w) * u > 0))


def synth_logreg(n_features: int, n_rows: int, separation: float, seed: int) -> LabeledData:
    """Two isotropic Gaussian clouds, means +-separation/2 on a random axis."""
    if n_rows < 2:
        raise ValueError("need at least 2 rows")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n_rows) * 2.0 - 1.0
    Z = rng.standard_normal((n_rows, n_features))
    Z += np.outer(labels, 0.5 * separation * direction)
    return LabeledData(features=Z, labels=labels)


def logreg_load_csv(path, n_t1: int, n_t2: int, seed: int = 0) -> LabeledData:
    """Parse label-first CSV rows, shuffle by seed, keep the first n_t1.

    Labels must be in {-1, +1} or {0, 1} (remapped to -1/+1). The LL subset
    is positional: the first n_t2 of the returned rows. An optional header
    line is skipped when its fields do not parse as numbers.
    """
    rows: list[list[float]] = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            try:
                vals = [float(tok) for tok in rec]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"line {lineno}: non-numeric field") from None
            if vals[0] not in (-1.0, 0.0, 1.0):
                raise ValueError(f"line {lineno}: label {vals[0]:g} not in {{-1,0,1}}")
            if len(vals) < 2:
                raise ValueError(f"line {lineno}: row has no features")
            rows.append(vals)
    if not rows:
        raise ValueError("no data rows found")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError("rows have inconsistent field counts")
    data = np.asarray(rows, dtype=np.float64)
    labels = data[:, 0]
    if np.all(np.isin(labels, (0.0, 1.0))):
        labels = 2.0 * labels - 1.0
    if not (1 <= n_t2 <= n_t1 <= data.shape[0]):
        raise ValueError(
            f"split ({n_t1}, {n_t2}) impossible for {data.shape[0]} rows"
        )
    perm = np.random.default_rng(seed).permutation(data.shape[0])[:n_t1]
    return LabeledData(features=data[perm, 1:], labels=labels[perm])
