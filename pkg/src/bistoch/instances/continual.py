"""Class-incremental task sequence with an analytic two-layer perceptron.

The sequence presents T stages; stage t introduces two new classes, and the
stage-t objectives average over the unions of all validation (UL) and
training (LL) sets seen so far. The model is

    logits = tanh(z W1 + b1) W2 + b2,      softmax cross-entropy loss,

with the hidden layer flattened into the UL variable x (carried across
stages) and the stage-t output layer flattened into the LL variable y
(re-initialized every stage, width growing with the label set). Gradients
are exact chain-rule; no Hessian actions are advertised, so only the
gradient-based engines run here.

Default data is synthetic: 2-D Gaussian blobs on a circle, two per stage.
An IDX loader is provided for externally supplied image data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from ..problem import BatchSpec, Draw, Iterate, OracleSample, ProblemHandle, StreamBank


@dataclass(frozen=True)
class MLPSpec:
    """Two-layer tanh perceptron shape: in_dim -> hidden -> n_classes."""

    in_dim: int
    hidden: int
    n_classes: int

    @property
    def x_dim(self) -> int:
        return self.in_dim * self.hidden + self.hidden

    @property
    def y_dim(self) -> int:
        return self.hidden * self.n_classes + self.n_classes

    def unpack_x(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W1 = x[: self.in_dim * self.hidden].reshape(self.in_dim, self.hidden)
        return W1, x[self.in_dim * self.hidden:]

    def unpack_y(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W2 = y[: self.hidden * self.n_classes].reshape(self.hidden, self.n_classes)
        return W2, y[self.hidden * self.n_classes:]


def mlp_loss(spec: MLPSpec, x: np.ndarray, y: np.ndarray,
             Z: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the rows."""
    W1, b1 = spec.unpack_x(np.asarray(x, float))
    W2, b2 = spec.unpack_y(np.asarray(y, float))
    H = np.tanh(Z @ W1 + b1)
    L = H @ W2 + b2
    lse = np.logaddexp.reduce(L, axis=1)
    return float(np.mean(lse - L[np.arange(len(labels)), labels]))


def mlp_backprop(spec: MLPSpec, x: np.ndarray, y: np.ndarray,
                 Z: np.ndarray, labels: np.ndarray
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """(loss, grad wrt x, grad wrt y), exact chain rule, mean reduction."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.ndim != 2 or Z.shape[1] != spec.in_dim:
        raise ValueError("rows must be (B, in_dim)")
    B = Z.shape[0]
    W1, b1 = spec.unpack_x(np.asarray(x, float))
    W2, b2 = spec.unpack_y(np.asarray(y, float))

    H = np.tanh(Z @ W1 + b1)
    L = H @ W2 + b2
    L_shift = L - L.max(axis=1, keepdims=True)
    expL = np.exp(L_shift)
    P = expL / expL.sum(axis=1, keepdims=True)
    lse = np.log(expL.sum(axis=1)) + L.max(axis=1)
    loss = float(np.mean(lse - L[np.arange(B), labels]))

    G = P.copy()
    G[np.arange(B), labels] -= 1.0
    G /= B
    gW2 = H.T @ G
    gb2 = G.sum(axis=0)
    dH = G @ W2.T
    dpre = dH * (1.0 - H * H)
    gW1 = Z.T @ dpre
    gb1 = dpre.sum(axis=0)
    return (loss,
            np.concatenate([gW1.ravel(), gb1]),
            np.concatenate([gW2.ravel(), gb2]))


def mlp_error_rate(spec: MLPSpec, x: np.ndarray, y: np.ndarray,
                   Z: np.ndarray, labels: np.ndarray) -> float:
    """Misclassification fraction under the argmax rule."""
    W1, b1 = spec.unpack_x(np.asarray(x, float))
    W2, b2 = spec.unpack_y(np.asarray(y, float))
    pred = (np.tanh(Z @ W1 + b1) @ W2 + b2).argmax(axis=1)
    return float(np.mean(pred != np.asarray(labels)))


@dataclass(frozen=True)
class StageData:
    """New-class rows introduced by one stage."""

    train_Z: np.ndarray
    train_labels: np.ndarray
    val_Z: np.ndarray
    val_labels: np.ndarray


class ContinualLearningSeq:
    """Ordered stages, two new classes each, plus the shared model shape."""

    def __init__(
        self,
        stages: list[StageData],
        in_dim: int,
        hidden: int = 16,
        ul_frac: float = 0.005,
        ll_frac: float = 0.001,
        eval_ul_frac: float = 0.05,
        eval_ll_frac: float = 0.01,
        init_scale: float = 0.1,
    ):
        if not stages:
            raise ValueError("need at least one stage")
        for frac in (ul_frac, ll_frac, eval_ul_frac, eval_ll_frac):
            if not 0 < frac <= 1:
                raise ValueError("batch fractions must be in (0, 1]")
        self.stages = list(stages)
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        self.ul_frac = float(ul_frac)
        self.ll_frac = float(ll_frac)
        self.eval_ul_frac = float(eval_ul_frac)
        self.eval_ll_frac = float(eval_ll_frac)
        self.init_scale = float(init_scale)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def classes_at(self, t: int) -> int:
        return 2 * t

    @staticmethod
    def synthetic(
        n_stages: int = 5,
        per_class_train: int = 500,
        per_class_val: int = 250,
        radius: float = 3.0,
        spread: float = 0.6,
        hidden: int = 16,
        seed: int = 0,
        **kwargs,
    ) -> "ContinualLearningSeq":
        """Gaussian blobs on a circle, classes 2t-2 and 2t-1 new at stage t."""
        rng = np.random.default_rng(seed)
        n_classes = 2 * n_stages
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        stages = []
        for t in range(n_stages):
            blocks_tr, blocks_va = [], []
            for c in (2 * t, 2 * t + 1):
                tr = means[c] + spread * rng.standard_normal((per_class_train, 2))
                va = means[c] + spread * rng.standard_normal((per_class_val, 2))
                blocks_tr.append((tr, np.full(per_class_train, c)))
                blocks_va.append((va, np.full(per_class_val, c)))
            stages.append(StageData(
                train_Z=np.vstack([b[0] for b in blocks_tr]),
                train_labels=np.concatenate([b[1] for b in blocks_tr]),
                val_Z=np.vstack([b[0] for b in blocks_va]),
                val_labels=np.concatenate([b[1] for b in blocks_va]),
            ))
        return ContinualLearningSeq(stages, in_dim=2, hidden=hidden, **kwargs)


class CLStageProblem(ProblemHandle):
    """Stage-t view of the sequence: unions up to t, output width 2t."""

    def __init__(self, seq: ContinualLearningSeq, t: int,
                 x_start: Optional[np.ndarray] = None):
        if not 1 <= t <= seq.n_stages:
            raise ValueError(f"stage {t} out of range 1..{seq.n_stages}")
        self.seq = seq
        self.t = int(t)
        self.spec = MLPSpec(seq.in_dim, seq.hidden, seq.classes_at(t))
        parts = seq.stages[:t]
        self._val_Z = np.vstack([s.val_Z for s in parts])
        self._val_labels = np.concatenate([s.val_labels for s in parts]).astype(np.int64)
        self._tr_Z = np.vstack([s.train_Z for s in parts])
        self._tr_labels = np.concatenate([s.train_labels for s in parts]).astype(np.int64)
        if x_start is not None:
            x_start = np.asarray(x_start, dtype=np.float64)
            if x_start.shape != (self.spec.x_dim,):
                raise ValueError("x_start has the wrong hidden-layer dimension")
        self.x_start = x_start

    # -- structure ---------------------------------------------------------

    def dims(self) -> tuple[int, int]:
        return self.spec.x_dim, self.spec.y_dim

    def dataset_sizes(self) -> tuple[int, int]:
        return self._val_Z.shape[0], self._tr_Z.shape[0]

    def stage_batch_sizes(self) -> tuple[int, int]:
        """Mini-batch sizes from the sequence's training fractions."""
        nu, nl = self.dataset_sizes()
        return (max(1, round(self.seq.ul_frac * nu)),
                max(1, round(self.seq.ll_frac * nl)))

    def initial_iterate(self, streams: StreamBank) -> Iterate:
        init = streams.stream("init")
        x = (self.x_start.copy() if self.x_start is not None
             else self.seq.init_scale * init.standard_normal(self.spec.x_dim))
        y = self.seq.init_scale * init.standard_normal(self.spec.y_dim)
        return Iterate(x, y)

    # -- sampling ----------------------------------------------------------

    def draw(self, batch: BatchSpec) -> Draw:
        bu, bl = self.clamp_batch(batch.ul_batch, batch.ll_batch)
        nu, nl = self.dataset_sizes()
        ul_idx = batch.streams.stream("ul").choice(nu, size=bu, replace=False)
        ll_idx = batch.streams.stream("ll").choice(nl, size=bl, replace=False)
        return Draw(ul_size=bu, ll_size=bl, ul_indices=ul_idx, ll_indices=ll_idx)

    def full_draw(self) -> Draw:
        nu, nl = self.dataset_sizes()
        return Draw(ul_size=0, ll_size=0,
                    ul_indices=np.arange(nu), ll_indices=np.arange(nl))

    def sample_at(self, it: Iterate, draw: Draw, with_hessians: bool = False) -> OracleSample:
        if with_hessians:
            from ..problem import CapabilityError

            raise CapabilityError("perceptron stages expose gradients only")
        Zu = self._val_Z[draw.ul_indices]
        lu = self._val_labels[draw.ul_indices]
        Zl = self._tr_Z[draw.ll_indices]
        ll = self._tr_labels[draw.ll_indices]
        fu, gux, guy = mlp_backprop(self.spec, it.x, it.y, Zu, lu)
        fl, glx, gly = mlp_backprop(self.spec, it.x, it.y, Zl, ll)
        return OracleSample(
            gux=gux, guy=guy, glx=glx, gly=gly,
            fu_value=fu, fl_value=fl,
            accessed=draw.ul_size + draw.ll_size,
        )

    def ll_grads_at(self, x, y, draw: Draw) -> tuple[np.ndarray, np.ndarray]:
        Zl = self._tr_Z[draw.ll_indices]
        ll = self._tr_labels[draw.ll_indices]
        _, glx, gly = mlp_backprop(self.spec, x, y, Zl, ll)
        return glx, gly

    # -- evaluation ----------------------------------------------------------

    def ul_value_full(self, it: Iterate) -> float:
        return mlp_loss(self.spec, it.x, it.y, self._val_Z, self._val_labels)

    def ll_value_full(self, it: Iterate) -> float:
        return mlp_loss(self.spec, it.x, it.y, self._tr_Z, self._tr_labels)

    def eval_values(self, it: Iterate, streams: StreamBank) -> tuple[float, float]:
        """Objective estimates on the designated (larger) evaluation batches."""
        nu, nl = self.dataset_sizes()
        bu = max(1, round(self.seq.eval_ul_frac * nu))
        bl = max(1, round(self.seq.eval_ll_frac * nl))
        ev = streams.stream("eval")
        ul_idx = ev.choice(nu, size=bu, replace=False)
        ll_idx = ev.choice(nl, size=bl, replace=False)
        ul = mlp_loss(self.spec, it.x, it.y,
                      self._val_Z[ul_idx], self._val_labels[ul_idx])
        ll = mlp_loss(self.spec, it.x, it.y,
                      self._tr_Z[ll_idx], self._tr_labels[ll_idx])
        return ul, ll

    def val_error(self, x: np.ndarray, y: np.ndarray) -> float:
        """Misclassification rate on the full validation union."""
        return mlp_error_rate(self.spec, x, y, self._val_Z, self._val_labels)

    def ll_solve_accurate(self, x: np.ndarray, tol: float = 1e-8) -> np.ndarray:
        """Output-layer fit at fixed features: L-BFGS from a fixed start."""
        Z, labels, spec = self._tr_Z, self._tr_labels, self.spec

        def fg(y):
            loss, _, gy = mlp_backprop(spec, x, y, Z, labels)
            return loss, gy

        res = minimize(fg, np.zeros(spec.y_dim), jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "gtol": max(tol, 1e-12)})
        return res.x


def cl_stage_problem(seq: ContinualLearningSeq, t: int,
                     x_start: Optional[np.ndarray] = None) -> CLStageProblem:
    """Stage-t handle; pass the previous stage's final x to carry it forward."""
    return CLStageProblem(seq, t, x_start=x_start)


def load_idx(path) -> np.ndarray:
    """Read one big-endian IDX file; pixel payloads are scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError("not an IDX file (bad magic)")
    dtype_code, n_dims = raw[2], raw[3]
    dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
              0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise ValueError(f"unsupported IDX dtype 0x{dtype_code:02x}")
    dims = struct.unpack(f">{n_dims}I", raw[4: 4 + 4 * n_dims])
    data = np.frombuffer(raw, dtype=dtypes[dtype_code], offset=4 + 4 * n_dims)
    if data.size != int(np.prod(dims)):
        raise ValueError("IDX payload size does not match header dims")
    data = data.reshape(dims)
    if dtype_code == 0x08 and n_dims > 1:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64) if n_dims == 1 else data.astype(np.float64)
