"""Command-line entry point: run configs, fit rates, compare, run demos."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import (
    DEMO_NAMES,
    ConfigError,
    apply_overrides,
    compare_table,
    config_hash,
    demo_config,
    fit_rate,
    parse_config,
    read_trace_csv,
    run_config,
    write_toml,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bistoch",
        description="Bilevel stochastic descent benchmark harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a TOML run configuration")
    p_run.add_argument("config", help="path to the TOML config file")
    _add_overrides(p_run)

    p_rates = sub.add_parser("rates", help="fit log-log convergence rates")
    p_rates.add_argument("traces", nargs="+", help="trace CSV file(s)")
    p_rates.add_argument("--fstar", type=float, required=True,
                         help="optimal value the gap is measured against")
    p_rates.add_argument("--window", default="1:1000000",
                         help="iteration window as k_min:k_max")

    p_cmp = sub.add_parser("compare", help="rank solvers from a run directory")
    p_cmp.add_argument("dir", help="output directory holding manifest.json")

    p_demo = sub.add_parser("demo", help="run a named demo configuration")
    p_demo.add_argument("name", choices=DEMO_NAMES)
    _add_overrides(p_demo)

    return parser


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="replace the config's seed list with this one seed")
    p.add_argument("--workers", type=int, default=1,
                   help="max concurrent (solver, seed) runs")
    p.add_argument("--out", default=None, help="override the output directory")


def _parse_window(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"--window: expected k_min:k_max, got '{text}'") from None


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out)
    out = run_config(cfg, workers=max(1, args.workers))
    print(f"wrote traces, summary.csv, manifest.json to {out}")
    return 0


def _cmd_rates(args) -> int:
    window = _parse_window(args.window)
    for path in args.traces:
        fit = fit_rate(read_trace_csv(path), args.fstar, window)
        print(f"{path}: slope={fit.slope:.4f} intercept={fit.intercept:.4f} "
              f"r2={fit.r2:.6f} window={fit.window[0]}:{fit.window[1]}")
    return 0


def _cmd_compare(args) -> int:
    out = Path(args.dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{out}: no manifest.json (run a config here first)")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    traces_by_solver = {}
    for label, by_seed in manifest["traces"].items():
        traces_by_solver[label] = {}
        for seed, names in by_seed.items():
            csv_names = [n for n in names if not n.endswith("_jumps.csv")]
            traces_by_solver[label][int(seed)] = read_trace_csv(out / csv_names[-1])
    rows = compare_table(traces_by_solver)
    header = f"{'rank':>4}  {'label':<24} {'mean final f_true':>18} " \
             f"{'min final f_true':>18} {'mean accessed':>14}"
    print(header)
    for row in rows:
        print(f"{row['rank']:>4}  {row['label']:<24} "
              f"{row['mean_final_f_true']:>18.10g} "
              f"{row['min_final_f_true']:>18.10g} "
              f"{row['mean_accessed']:>14.1f}")
    return 0


def _cmd_demo(args) -> int:
    cfg = demo_config(args.name, out_dir=args.out)
    cfg = apply_overrides(cfg, seed=args.seed)
    out = Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_toml(cfg, out / "config.toml")
    run_config(cfg, workers=max(1, args.workers))
    print(f"demo '{args.name}' ({config_hash(cfg)[:12]}) wrote artifacts to {out}")
    return 0


_COMMANDS = {"run": _cmd_run, "rates": _cmd_rates, "compare": _cmd_compare,
             "demo": _cmd_demo}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
