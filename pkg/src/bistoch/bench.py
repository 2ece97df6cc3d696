"""Benchmark harness: config files, trace persistence, rate fits, comparisons.

A run configuration is a TOML file with an ``[instance]`` block, a ``[run]``
block (seeds, output directory), and one or more ``[[solvers]]`` tables.
Unknown keys anywhere are hard errors — silent typos poison benchmarks.
Executing a config writes one trace CSV per (solver, seed), a summary CSV
aggregated across seeds, and a manifest recording the config hash; reruns
with the same config are byte-identical except for the wall_seconds column.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .directions import ENGINES, DirectionSpec
from .instances import (
    ContinualLearningSeq,
    LogRegBilevel,
    QuadraticBilevel,
    cl_stage_problem,
    synth_logreg,
)
from .problem import ProblemHandle, StreamBank
from .solvers import (
    InnerPolicy,
    RunTrace,
    SamplingPolicy,
    SolverConfig,
    StepsizeSchedule,
    TraceRecord,
    run_bsg,
    run_darts,
)

TRACE_COLUMNS = ("k", "accessed", "wall_seconds", "f_true",
                 "ul_value_eval", "ll_value_eval")


class ConfigError(ValueError):
    """Invalid run configuration, with the offending key path."""


# ---------------------------------------------------------------------------
# Trace persistence
# ---------------------------------------------------------------------------

def write_trace_csv(path, trace: RunTrace) -> None:
    """Write records with the exact six-column schema, LF line endings."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([r.k, r.accessed, repr(r.wall_seconds), repr(r.f_true),
                        repr(r.ul_value_eval), repr(r.ll_value_eval)])


def read_trace_csv(path) -> RunTrace:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(TRACE_COLUMNS)}")
        records = [
            TraceRecord(k=int(row[0]), accessed=int(row[1]),
                        wall_seconds=float(row[2]), f_true=float(row[3]),
                        ul_value_eval=float(row[4]), ll_value_eval=float(row[5]))
            for row in reader
        ]
    return RunTrace(records=records, meta={"path": str(path)})


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    window: tuple[int, int]


def fit_rate(trace: RunTrace, f_star: float, window: tuple[int, int]) -> RateFit:
    """Least-squares line on log10(running-min gap) vs log10(k) in window."""
    k_min, k_max = int(window[0]), int(window[1])
    if k_min < 1 or k_max <= k_min:
        raise ValueError("window must satisfy 1 <= k_min < k_max")
    ks, gaps = [], []
    best = np.inf
    for r in trace.records:
        best = min(best, r.f_true - f_star)
        if k_min <= r.k <= k_max:
            ks.append(r.k)
            gaps.append(best)
    ks = np.asarray(ks, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    keep = gaps > 0
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} nonpositive gap(s); "
            "window shrunk to the positive region",
            stacklevel=2,
        )
        ks, gaps = ks[keep], gaps[keep]
    if len(ks) < 10:
        raise ValueError(f"need >= 10 positive-gap records in window, got {len(ks)}")
    lx, ly = np.log10(ks), np.log10(gaps)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r2=r2,
                   window=(k_min, k_max))


def mean_gap_trace(traces: list[RunTrace], f_star: float) -> RunTrace:
    """Average f_true across seed traces (records must align on k)."""
    if not traces:
        raise ValueError("no traces to average")
    ks = [r.k for r in traces[0].records]
    for t in traces[1:]:
        if [r.k for r in t.records] != ks:
            raise ValueError("traces do not share an evaluation grid")
    records = []
    for i, k in enumerate(ks):
        records.append(TraceRecord(
            k=k,
            accessed=int(np.mean([t.records[i].accessed for t in traces])),
            wall_seconds=0.0,
            f_true=float(np.mean([t.records[i].f_true for t in traces])) ,
            ul_value_eval=float(np.mean([t.records[i].ul_value_eval for t in traces])),
            ll_value_eval=float(np.mean([t.records[i].ll_value_eval for t in traces])),
        ))
    return RunTrace(records=records, meta={"f_star": f_star, "n_seeds": len(traces)})


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------

def compare_table(traces_by_solver: dict[str, dict[int, RunTrace]]) -> list[dict]:
    """Per-solver summary rows ranked by mean final f_true (ties share rank)."""
    if not traces_by_solver:
        raise ValueError("no traces to compare")
    seed_sets = {label: set(by_seed) for label, by_seed in traces_by_solver.items()}
    universe = set.union(*seed_sets.values())
    gaps = {label: sorted(universe - s) for label, s in seed_sets.items() if universe - s}
    if gaps:
        missing = "; ".join(f"{label}: seeds {g}" for label, g in sorted(gaps.items()))
        raise ValueError(f"incomplete seed coverage — {missing}")
    instances = {
        t.meta.get("instance")
        for by_seed in traces_by_solver.values()
        for t in by_seed.values()
        if t.meta.get("instance") is not None
    }
    if len(instances) > 1:
        raise ValueError(f"traces mix instances: {sorted(instances)}")

    rows = []
    for label, by_seed in traces_by_solver.items():
        finals = [t.final for t in by_seed.values()]
        rows.append({
            "label": label,
            "mean_final_f_true": float(np.mean([r.f_true for r in finals])),
            "min_final_f_true": float(np.min([r.f_true for r in finals])),
            "mean_accessed": float(np.mean([r.accessed for r in finals])),
            "mean_wall_seconds": float(np.mean([r.wall_seconds for r in finals])),
        })
    rows.sort(key=lambda r: (r["mean_final_f_true"], r["label"]))
    rank, prev = 0, None
    for i, row in enumerate(rows, start=1):
        if prev is None or row["mean_final_f_true"] > prev:
            rank = i
        row["rank"] = rank
        prev = row["mean_final_f_true"]
    return rows


SUMMARY_COLUMNS = ("rank", "label", "mean_final_f_true", "min_final_f_true",
                   "mean_accessed", "mean_wall_seconds")


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([row["rank"], row["label"],
                        repr(row["mean_final_f_true"]),
                        repr(row["min_final_f_true"]),
                        repr(row["mean_accessed"]),
                        repr(row["mean_wall_seconds"])])


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_INSTANCE_KEYS = {
    "quadratic": {"kind", "n", "m", "noise_std", "seed", "singular_ul",
                  "constrained", "n_constraints", "exact_sg_simulation"},
    "logreg": {"kind", "n_features", "n_rows", "separation", "seed",
               "n_t1", "n_t2", "lam_reg", "superset_on_ul"},
    "continual": {"kind", "n_stages", "per_class_train", "per_class_val",
                  "hidden", "radius", "spread", "seed"},
}
_RUN_KEYS = {"seeds", "output_dir"}
_SOLVER_KEYS = {"label", "engine", "max_iters", "eval_every", "eval_tol",
                "ul_stepsize", "inner", "sampling", "direction"}
_STEPSIZE_KEYS = {"kind", "value"}
_INNER_KEYS = {"kind", "threshold", "gamma", "tol", "hotstart",
               "full_batch_objective", "ll_stepsize"}
_SAMPLING_KEYS = {"kind", "ul_batch", "ll_batch", "c_d", "sigma", "q", "cap"}
_DIRECTION_KEYS = {"darts_eta_one", "darts_scale_curvature", "darts_fd_coeff",
                   "cg_tol", "cg_max_iter", "denom_floor"}
_STEPSIZE_KINDS = {"fixed", "harmonic", "strongly_convex", "sqrt_decay"}


def _check_keys(block: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")


def _require(block: dict, key: str, path: str):
    if key not in block:
        raise ConfigError(f"{path}: missing required key '{key}'")
    return block[key]


def parse_config(path) -> dict:
    with open(Path(path), "rb") as fh:
        cfg = tomllib.load(fh)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, {"instance", "run", "solvers"}, "<top level>")
    inst = _require(cfg, "instance", "<top level>")
    kind = _require(inst, "kind", "instance")
    if kind not in _INSTANCE_KEYS:
        raise ConfigError(f"instance.kind: unknown instance '{kind}'")
    _check_keys(inst, _INSTANCE_KEYS[kind], "instance")

    run = _require(cfg, "run", "<top level>")
    _check_keys(run, _RUN_KEYS, "run")
    seeds = _require(run, "seeds", "run")
    if not isinstance(seeds, list) or not seeds or \
            not all(isinstance(s, int) for s in seeds):
        raise ConfigError("run.seeds: need a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("run.seeds: duplicate seeds")
    _require(run, "output_dir", "run")

    solvers = _require(cfg, "solvers", "<top level>")
    if not isinstance(solvers, list) or not solvers:
        raise ConfigError("solvers: need at least one [[solvers]] table")
    labels = set()
    for i, sol in enumerate(solvers):
        path = f"solvers[{i}]"
        _check_keys(sol, _SOLVER_KEYS, path)
        label = _require(sol, "label", path)
        if label in labels:
            raise ConfigError(f"{path}.label: duplicate label '{label}'")
        labels.add(label)
        engine = _require(sol, "engine", path)
        if engine not in ENGINES:
            raise ConfigError(f"{path}.engine: unknown engine '{engine}'")
        if int(_require(sol, "max_iters", path)) < 1:
            raise ConfigError(f"{path}.max_iters: must be >= 1")
        _validate_stepsize(_require(sol, "ul_stepsize", path), f"{path}.ul_stepsize")
        _validate_inner(_require(sol, "inner", path), f"{path}.inner")
        if kind == "continual":
            if "sampling" in sol:
                raise ConfigError(
                    f"{path}.sampling: continual stages fix batch sizes by "
                    "fraction; remove this block")
        else:
            _validate_sampling(_require(sol, "sampling", path), f"{path}.sampling")
        if "direction" in sol:
            _check_keys(sol["direction"], _DIRECTION_KEYS, f"{path}.direction")
        _validate_capabilities(kind, inst, sol, path)


def _validate_stepsize(block: dict, path: str, value_optional: bool = False) -> None:
    _check_keys(block, _STEPSIZE_KEYS, path)
    kind = _require(block, "kind", path)
    if kind not in _STEPSIZE_KINDS:
        raise ConfigError(f"{path}.kind: unknown schedule '{kind}'")
    if "value" in block:
        if float(block["value"]) <= 0:
            raise ConfigError(f"{path}.value: must be positive")
    elif kind != "strongly_convex":
        raise ConfigError(f"{path}: missing required key 'value'")
    # strongly_convex without a value uses the instance's convexity modulus.


def _validate_inner(block: dict, path: str) -> None:
    _check_keys(block, _INNER_KEYS, path)
    kind = _require(block, "kind", path)
    if kind not in ("one_step", "inc_acc", "k_squared", "accurate"):
        raise ConfigError(f"{path}.kind: unknown inner policy '{kind}'")
    if kind in ("one_step", "inc_acc"):
        _validate_stepsize(_require(block, "ll_stepsize", path),
                           f"{path}.ll_stepsize")
    if kind == "inc_acc" and float(_require(block, "threshold", path)) <= 0:
        raise ConfigError(f"{path}.threshold: must be positive")
    if kind == "k_squared" and float(_require(block, "gamma", path)) <= 0:
        raise ConfigError(f"{path}.gamma: must be positive")


def _validate_sampling(block: dict, path: str) -> None:
    _check_keys(block, _SAMPLING_KEYS, path)
    kind = _require(block, "kind", path)
    if kind == "fixed":
        for key in ("ul_batch", "ll_batch"):
            if int(_require(block, key, path)) < 1:
                raise ConfigError(f"{path}.{key}: must be >= 1")
    elif kind == "dynamic":
        for key in ("c_d", "sigma", "q"):
            if float(_require(block, key, path)) <= 0:
                raise ConfigError(f"{path}.{key}: must be positive")
    else:
        raise ConfigError(f"{path}.kind: unknown sampling policy '{kind}'")


def _validate_capabilities(kind: str, inst: dict, sol: dict, path: str) -> None:
    engine = sol["engine"]
    constrained = bool(inst.get("constrained", False)) if kind == "quadratic" else False
    if kind == "continual" and engine in ("adjoint_exact", "bsg_h", "lq"):
        raise ConfigError(
            f"{path}.engine: {engine} needs Hessian actions or constraints "
            "the perceptron stages do not provide")
    if engine == "darts":
        if constrained:
            raise ConfigError(f"{path}.engine: darts cannot run a constrained LL")
        if sol["inner"].get("kind") != "one_step":
            raise ConfigError(f"{path}.inner.kind: darts pairs with one_step")


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form; changes iff any field changes."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_instance(inst: dict):
    """(problem-or-sequence, f_star or None) from an instance block."""
    kind = inst["kind"]
    seed = int(inst.get("seed", 0))
    if kind == "quadratic":
        n = int(inst.get("n", 6))
        m = int(inst.get("m", 6))
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, m)) / np.sqrt(m)
        S = None
        if bool(inst.get("singular_ul", False)):
            # Convex but not strongly convex: share a null direction between
            # the UL weight and the coupling so S + A A^T is singular PSD.
            Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            s_diag = rng.uniform(0.5, 1.5, size=n)
            a_diag = rng.uniform(0.5, 1.5, size=min(n, m))
            s_diag[-1] = 0.0
            a_diag[-1] = 0.0
            S = Q @ np.diag(s_diag) @ Q.T
            A = Q @ np.diag(np.concatenate([a_diag, np.zeros(max(0, n - m))])[:n])[:, :m]
        B = C = None
        if bool(inst.get("constrained", False)):
            p = int(inst.get("n_constraints", 1))
            B = rng.standard_normal((p, m))
            C = rng.standard_normal((p, n))
        prob = QuadraticBilevel(
            A, noise_std=float(inst.get("noise_std", 0.0)), ul_weight=S,
            B=B, C=C, x0=rng.standard_normal(n),
            exact_sg_simulation=bool(inst.get("exact_sg_simulation", True)),
        )
        return prob, 0.0  # f(x) >= 0 with value 0 at x = 0
    if kind == "logreg":
        data = synth_logreg(
            n_features=int(inst.get("n_features", 20)),
            n_rows=int(inst.get("n_rows", 3000)),
            separation=float(inst.get("separation", 3.0)),
            seed=seed,
        )
        prob = LogRegBilevel(
            data,
            n_t1=int(inst.get("n_t1", data.n_rows)),
            n_t2=int(inst.get("n_t2", max(1, data.n_rows // 4))),
            lam_reg=float(inst.get("lam_reg", 0.1)),
            superset_on_ul=bool(inst.get("superset_on_ul", False)),
        )
        return prob, None
    if kind == "continual":
        seq = ContinualLearningSeq.synthetic(
            n_stages=int(inst.get("n_stages", 5)),
            per_class_train=int(inst.get("per_class_train", 500)),
            per_class_val=int(inst.get("per_class_val", 250)),
            radius=float(inst.get("radius", 3.0)),
            spread=float(inst.get("spread", 0.6)),
            hidden=int(inst.get("hidden", 16)),
            seed=seed,
        )
        return seq, None
    raise ConfigError(f"instance.kind: unknown instance '{kind}'")


def _build_stepsize(block: dict, problem: Optional[ProblemHandle]) -> StepsizeSchedule:
    kind = block["kind"]
    if kind == "strongly_convex" and "value" not in block:
        if problem is None or not hasattr(problem, "reduced_convexity_modulus"):
            raise ConfigError(
                "ul_stepsize: strongly_convex without a value needs an "
                "instance with a known convexity modulus")
        return StepsizeSchedule.strongly_convex(problem.reduced_convexity_modulus())
    value = float(block["value"])
    return {
        "fixed": StepsizeSchedule.fixed,
        "harmonic": StepsizeSchedule.harmonic,
        "strongly_convex": StepsizeSchedule.strongly_convex,
        "sqrt_decay": StepsizeSchedule.sqrt_decay,
    }[kind](value)


def _build_inner(block: dict, problem) -> InnerPolicy:
    kind = block["kind"]
    hot = bool(block.get("hotstart", True))
    if kind == "accurate":
        return InnerPolicy.accurate(tol=float(block.get("tol", 1e-8)))
    if kind == "k_squared":
        return InnerPolicy.k_squared(float(block["gamma"]), hotstart=hot)
    ll = _build_stepsize(block["ll_stepsize"], problem)
    if kind == "one_step":
        return InnerPolicy.one_step(ll, hotstart=hot)
    return InnerPolicy.inc_acc(
        ll, threshold=float(block["threshold"]), hotstart=hot,
        full_batch_objective=bool(block.get("full_batch_objective", False)),
    )


def _build_sampling(block: dict) -> SamplingPolicy:
    if block["kind"] == "fixed":
        return SamplingPolicy.fixed(int(block["ul_batch"]), int(block["ll_batch"]))
    return SamplingPolicy.dynamic(
        c_d=float(block["c_d"]), sigma=float(block["sigma"]),
        q=float(block["q"]), cap=int(block.get("cap", 2**20)),
    )


def build_solver_config(sol: dict, seed: int, problem,
                        sampling: Optional[SamplingPolicy] = None) -> SolverConfig:
    dir_block = sol.get("direction", {})
    spec = DirectionSpec(
        engine=sol["engine"],
        darts_eta_one=bool(dir_block.get("darts_eta_one", False)),
        darts_scale_curvature=bool(dir_block.get("darts_scale_curvature", False)),
        darts_fd_coeff=float(dir_block.get("darts_fd_coeff", 0.01)),
        cg_tol=float(dir_block.get("cg_tol", 1e-10)),
        cg_max_iter=dir_block.get("cg_max_iter"),
        denom_floor=float(dir_block.get("denom_floor", 1e-12)),
    )
    return SolverConfig(
        direction=spec,
        ul_stepsize=_build_stepsize(sol["ul_stepsize"], problem),
        inner=_build_inner(sol["inner"], problem),
        sampling=sampling or _build_sampling(sol["sampling"]),
        max_iters=int(sol["max_iters"]),
        master_seed=seed,
        eval_every=int(sol.get("eval_every", 10)),
        eval_tol=float(sol.get("eval_tol", 1e-8)),
    )


def _dispatch(problem, config: SolverConfig) -> RunTrace:
    if config.direction.engine == "darts":
        return run_darts(problem, config)
    return run_bsg(problem, config)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def trace_filename(label: str, seed: int, stage: Optional[int] = None) -> str:
    if stage is None:
        return f"{label}_seed{seed}.csv"
    return f"{label}_seed{seed}_stage{stage}.csv"


def execute_run(cfg: dict, solver_index: int, seed: int, out_dir: str) -> list[str]:
    """Run one (solver, seed) cell of a config; returns written file names.

    Top level so worker processes can import and call it. Continual
    instances execute the staged protocol: the hidden layer carries across
    stages, the output layer re-initializes, and a per-stage trace plus a
    stage-boundary validation-error file are written.
    """
    inst = cfg["instance"]
    sol = cfg["solvers"][solver_index]
    label = sol["label"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    built, _ = build_instance(inst)

    if inst["kind"] != "continual":
        config = build_solver_config(sol, seed, built)
        trace = _dispatch(built, config)
        trace.meta["instance"] = _instance_key(inst)
        name = trace_filename(label, seed)
        write_trace_csv(out / name, trace)
        return [name]

    seq: ContinualLearningSeq = built
    written = []
    x_carry = None
    boundary_rows = []
    for t in range(1, seq.n_stages + 1):
        stage = cl_stage_problem(seq, t, x_start=x_carry)
        sizes = stage.stage_batch_sizes()
        config = build_solver_config(
            sol, seed * 1009 + t, stage, sampling=SamplingPolicy.fixed(*sizes))
        it0 = stage.initial_iterate(StreamBank(config.master_seed))
        err_start = stage.val_error(it0.x, it0.y)
        trace = _dispatch(stage, config)
        x_carry = trace.meta["x_final"]
        err_end = stage.val_error(trace.meta["x_final"], trace.meta["y_final"])
        boundary_rows.append((t, err_start, err_end))
        name = trace_filename(label, seed, stage=t)
        write_trace_csv(out / name, trace)
        written.append(name)
    jumps_name = f"{label}_seed{seed}_jumps.csv"
    with open(out / jumps_name, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("stage", "val_error_start", "val_error_end"))
        for t, e0, e1 in boundary_rows:
            w.writerow([t, repr(e0), repr(e1)])
    written.append(jumps_name)
    return written


def _instance_key(inst: dict) -> str:
    return json.dumps(inst, sort_keys=True, separators=(",", ":"))


def count_validation_jumps(rows: list[tuple[int, float, float]]) -> int:
    """Stage-boundary jumps: start(1) > end(1), then start(t) > end(t-1)."""
    jumps = 0
    ordered = sorted(rows)
    for i, (t, e0, e1) in enumerate(ordered):
        if i == 0:
            jumps += int(e0 > e1)
        else:
            jumps += int(e0 > ordered[i - 1][2])
    return jumps


def read_jumps_csv(path) -> list[tuple[int, float, float]]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(r[0]), float(r[1]), float(r[2])) for r in reader]


def apply_overrides(cfg: dict, seed: Optional[int] = None,
                    out: Optional[str] = None) -> dict:
    """New config with the seed list and/or output directory replaced."""
    run = dict(cfg["run"])
    if seed is not None:
        run["seeds"] = [int(seed)]
    if out is not None:
        run["output_dir"] = str(out)
    return {**cfg, "run": run}


def run_config(cfg: dict, workers: int = 1) -> Path:
    """Execute every (solver, seed) cell; write summary + manifest.

    Returns the output directory. Cells run in worker processes when
    workers > 1; each cell owns its trace file, and the summary is built
    after all cells join.
    """
    validate_config(cfg)
    seeds = cfg["run"]["seeds"]
    out = Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    cells = [(i, s) for i in range(len(cfg["solvers"])) for s in seeds]
    files: dict[str, dict[int, list[str]]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(execute_run, cfg, i, s, str(out)): (i, s)
                for i, s in cells
            }
            for fut, (i, s) in futures.items():
                files.setdefault(cfg["solvers"][i]["label"], {})[s] = fut.result()
    else:
        for i, s in cells:
            files.setdefault(cfg["solvers"][i]["label"], {})[s] = \
                execute_run(cfg, i, s, str(out))

    def final_trace_name(names: list[str]) -> str:
        # Continual cells append a jumps file after the last stage trace.
        return names[-2] if names[-1].endswith("_jumps.csv") else names[-1]

    traces_by_solver = {
        label: {s: read_trace_csv(out / final_trace_name(names))
                for s, names in by_seed.items()}
        for label, by_seed in files.items()
    }
    for label, by_seed in traces_by_solver.items():
        for t in by_seed.values():
            t.meta["instance"] = _instance_key(cfg["instance"])
    rows = compare_table(traces_by_solver)
    write_summary_csv(out / "summary.csv", rows)

    _, f_star = build_instance(cfg["instance"])
    manifest = {
        "config_hash": config_hash(cfg),
        "seeds": list(seeds),
        "labels": [sol["label"] for sol in cfg["solvers"]],
        "instance": cfg["instance"],
        "f_star": f_star,
        "f_star_source": "closed_form" if f_star is not None else None,
        "traces": {label: {str(s): names for s, names in by_seed.items()}
                   for label, by_seed in files.items()},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def reference_f_star(problem: ProblemHandle, max_iters: int = 2000,
                     c0: float = 1.0) -> float:
    """Long deterministic full-batch run standing in for a line-search solve."""
    engine = "adjoint_exact" if problem.has_hessians else "bsg_1"
    nu, nl = problem.dataset_sizes()
    config = SolverConfig(
        direction=DirectionSpec(engine=engine),
        ul_stepsize=StepsizeSchedule.harmonic(c0),
        inner=InnerPolicy.accurate(tol=1e-10),
        sampling=SamplingPolicy.fixed(nu, nl),
        max_iters=max_iters,
        master_seed=0,
        eval_every=max(1, max_iters // 100),
    )
    trace = run_bsg(problem, config)
    return float(np.min(trace.f_true))


# ---------------------------------------------------------------------------
# TOML emission (for demo configs)
# ---------------------------------------------------------------------------

def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot emit {type(v).__name__} as TOML")


def _emit_table(lines: list[str], header: str, table: dict, array: bool = False):
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    lines.append(("[[" + header + "]]") if array else ("[" + header + "]"))
    for k, v in scalars.items():
        lines.append(f"{k} = {_toml_scalar(v)}")
    lines.append("")
    for k, v in subtables.items():
        _emit_table(lines, f"{header}.{k}", v)


def write_toml(cfg: dict, path) -> None:
    lines: list[str] = []
    _emit_table(lines, "instance", cfg["instance"])
    _emit_table(lines, "run", cfg["run"])
    for sol in cfg["solvers"]:
        _emit_table(lines, "solvers", sol, array=True)
    Path(path).write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Demo configurations
# ---------------------------------------------------------------------------

def _stepsize(kind: str, value: Optional[float] = None) -> dict:
    return {"kind": kind} if value is None else {"kind": kind, "value": value}


def demo_config(name: str, out_dir: Optional[str] = None) -> dict:
    """Named, self-contained run configurations used by `demo <name>`."""
    out = out_dir or f"bench_out_{name.replace('-', '_')}"
    if name == "quadratic":
        return {
            "instance": {"kind": "quadratic", "n": 6, "m": 6,
                         "noise_std": 0.1, "seed": 7},
            "run": {"seeds": [0, 1, 2, 3, 4], "output_dir": out},
            "solvers": [
                {
                    "label": "bsgh_ksq", "engine": "bsg_h", "max_iters": 2000,
                    "eval_every": 50,
                    "ul_stepsize": _stepsize("strongly_convex"),
                    "inner": {"kind": "k_squared", "gamma": 1.0},
                    "sampling": {"kind": "fixed", "ul_batch": 64, "ll_batch": 64},
                },
                {
                    "label": "bsg1_1step", "engine": "bsg_1", "max_iters": 2000,
                    "eval_every": 50,
                    "ul_stepsize": _stepsize("harmonic", 10.0),
                    "inner": {"kind": "one_step",
                              "ll_stepsize": _stepsize("harmonic", 1.0)},
                    "sampling": {"kind": "fixed", "ul_batch": 64, "ll_batch": 64},
                },
            ],
        }
    if name in ("logreg", "logreg-darts-variants"):
        instance = {"kind": "logreg", "n_features": 20, "n_rows": 3000,
                    "separation": 6.0, "seed": 7, "n_t1": 3000, "n_t2": 750,
                    "lam_reg": 0.1}
        batch = {"kind": "fixed", "ul_batch": 512, "ll_batch": 512}
        base = {"max_iters": 3000, "eval_every": 100, "sampling": batch}
        if name == "logreg":
            solvers = [
                {"label": "bsg1_1step", "engine": "bsg_1",
                 "ul_stepsize": _stepsize("harmonic", 10.0),
                 "inner": {"kind": "one_step",
                           "ll_stepsize": _stepsize("harmonic", 10.0)},
                 **base},
                {"label": "bsgh_1step", "engine": "bsg_h",
                 "ul_stepsize": _stepsize("harmonic", 10.0),
                 "inner": {"kind": "one_step",
                           "ll_stepsize": _stepsize("harmonic", 10.0)},
                 **base},
                {"label": "bsgh_incacc", "engine": "bsg_h",
                 "ul_stepsize": _stepsize("harmonic", 10.0),
                 "inner": {"kind": "inc_acc", "threshold": 1e-4,
                           "ll_stepsize": _stepsize("harmonic", 10.0)},
                 **base},
                {"label": "darts", "engine": "darts",
                 "ul_stepsize": _stepsize("harmonic", 1.0),
                 "inner": {"kind": "one_step",
                           "ll_stepsize": _stepsize("harmonic", 1.0)},
                 **base},
            ]
        else:
            def darts_solver(label, **flags):
                return {"label": label, "engine": "darts",
                        "ul_stepsize": _stepsize("harmonic", 1.0),
                        "inner": {"kind": "one_step",
                                  "ll_stepsize": _stepsize("harmonic", 1.0)},
                        "direction": flags, **base}
            solvers = [
                darts_solver("darts_plain"),
                darts_solver("darts_scaled", darts_scale_curvature=True),
                darts_solver("darts_eta1", darts_eta_one=True),
                darts_solver("darts_both", darts_scale_curvature=True,
                             darts_eta_one=True),
            ]
        return {"instance": instance,
                "run": {"seeds": [0, 1, 2, 3, 4], "output_dir": out},
                "solvers": solvers}
    if name == "continual":
        return {
            "instance": {"kind": "continual", "n_stages": 5, "seed": 13,
                         "per_class_train": 500, "per_class_val": 250,
                         "hidden": 16},
            "run": {"seeds": [0, 1, 2, 3, 4], "output_dir": out},
            "solvers": [
                {"label": "bsg1_incacc", "engine": "bsg_1", "max_iters": 300,
                 "eval_every": 150, "eval_tol": 1e-6,
                 "ul_stepsize": _stepsize("fixed", 0.007),
                 "inner": {"kind": "inc_acc", "threshold": 1e-1,
                           "ll_stepsize": _stepsize("fixed", 0.007)}},
                {"label": "darts", "engine": "darts", "max_iters": 300,
                 "eval_every": 150, "eval_tol": 1e-6,
                 "ul_stepsize": _stepsize("fixed", 0.007),
                 "inner": {"kind": "one_step",
                           "ll_stepsize": _stepsize("fixed", 0.007)}},
            ],
        }
    if name == "lq-constrained":
        return {
            "instance": {"kind": "quadratic", "n": 4, "m": 8,
                         "noise_std": 0.05, "seed": 17,
                         "constrained": True, "n_constraints": 2},
            "run": {"seeds": [0, 1, 2], "output_dir": out},
            "solvers": [
                {"label": "lq", "engine": "lq", "max_iters": 300,
                 "eval_every": 25,
                 "ul_stepsize": _stepsize("harmonic", 0.5),
                 "inner": {"kind": "accurate"},
                 "sampling": {"kind": "fixed", "ul_batch": 64, "ll_batch": 64}},
            ],
        }
    raise ConfigError(
        f"unknown demo '{name}' (choose from quadratic, logreg, "
        "logreg-darts-variants, continual, lq-constrained)")


DEMO_NAMES = ("quadratic", "logreg", "logreg-darts-variants", "continual",
              "lq-constrained")
