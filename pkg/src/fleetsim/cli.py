"""Command-line entry point: ``fleetsim run|compare|gen-trace|validate-trace``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .autoscaler import Strategy
from .config import KV, ConfigError, parse_kv_file
from .domain import SECOND, FleetSimError
from .experiment import (ExperimentConfig, burst_workload, desk_workload, run_experiment, scheduler_config,
                         scheduler_workload, summarize)
from .routing import Policy
from .workload import ParseError, export_trace, generate_synthetic, ingest_trace, spec_from_kv
from . import catalog

EXIT_USAGE = 2
SCENARIOS = ("desk", "burst", "scheduler")

# option name -> (type, ExperimentConfig field, scale)
_TUNABLES = {
    "scheduler": (str, "scheduler", None),
    "tau_n": (float, "tau_n", SECOND),
    "tau_p": (float, "tau_p", SECOND),
    "region_threshold": (float, "region_threshold", None),
    "forecaster": (str, "forecaster", None),
    "arima_window": (int, "arima_window", None),
    "ma_window": (int, "ma_window", None),
    "epsilon": (float, "epsilon", None),
    "solver_budget_sec": (float, "solver_budget_sec", None),
    "up_threshold": (float, "up_threshold", None),
    "down_threshold": (float, "down_threshold", None),
    "cooldown": (float, "cooldown", SECOND),
    "decode_mode": (str, "decode_mode", None),
    "gpu": (str, "gpu", None),
    "initial_instances": (int, "initial_instances", None),
    "min_instances": (int, "min_instances", None),
    "region_capacity": (int, "region_capacity", None),
    "hourly_cost": (float, "hourly_cost", None),
}


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("global")
    g.add_argument("--seed", type=int, help="seed for the synthetic workload and the simulator")
    g.add_argument("--out", help="output directory")
    g.add_argument("--config", help="key=value file; command-line flags take precedence")


def _source(parser: argparse.ArgumentParser) -> None:
    src = parser.add_mutually_exclusive_group()
    src.add_argument("--trace", help="trace CSV (arrival_ts_ms,model,region,tier,input_tokens,output_tokens)")
    src.add_argument("--synthetic", help="synthetic workload key=value file")
    src.add_argument("--scenario", choices=SCENARIOS, help="built-in workload (default: desk)")


def _tunables(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("simulation")
    g.add_argument("--scheduler", choices=[p.value for p in Policy])
    g.add_argument("--tau-n", type=float, help="DPA severe-expiry threshold (s)")
    g.add_argument("--tau-p", type=float, help="DPA urgency threshold (s)")
    g.add_argument("--region-threshold", type=float, help="utilization above which requests leave their region")
    g.add_argument("--forecaster", choices=["arima", "ma"])
    g.add_argument("--arima-window", type=int, help="ARIMA training window (minutes)")
    g.add_argument("--ma-window", type=int, help="moving-average window (minutes)")
    g.add_argument("--epsilon", type=float, help="fraction of regional peak served locally")
    g.add_argument("--solver-budget-sec", type=float)
    g.add_argument("--up-threshold", type=float)
    g.add_argument("--down-threshold", type=float)
    g.add_argument("--cooldown", type=float, help="seconds between scaling actions on one endpoint")
    g.add_argument("--decode-mode", choices=["coarse", "iteration"])
    g.add_argument("--gpu", choices=sorted(catalog.GPUS))
    g.add_argument("--initial-instances", type=int)
    g.add_argument("--min-instances", type=int)
    g.add_argument("--region-capacity", type=int, help="VM limit per region")
    g.add_argument("--hourly-cost", type=float, help="cost of one instance-hour for the cost column")
    g.add_argument("--dump-requests", action="store_true", help="also write requests.csv")
    g.add_argument("--figures", action="store_true", help="also render PNG figures (matplotlib)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetsim", description="Multi-region LLM serving simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one strategy and write the output bundle")
    _common(run)
    _source(run)
    run.add_argument("--strategy", choices=[s.value for s in Strategy])
    _tunables(run)

    cmp_ = sub.add_parser("compare", help="simulate several strategies on the same workload")
    _common(cmp_)
    _source(cmp_)
    cmp_.add_argument("--strategies", help="comma-separated list (default reactive,lt-i,lt-u,lt-ua)")
    _tunables(cmp_)

    gen = sub.add_parser("gen-trace", help="write a synthetic workload as a trace CSV")
    _common(gen)
    src = gen.add_mutually_exclusive_group()
    src.add_argument("--synthetic", help="synthetic workload key=value file")
    src.add_argument("--scenario", choices=SCENARIOS)
    gen.add_argument("--output", help="trace path (default <out>/trace.csv)")

    val = sub.add_parser("validate-trace", help="parse a trace and report counts")
    _common(val)
    val.add_argument("--trace", required=False)
    val.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    return parser


def _merged(args: argparse.Namespace) -> dict:
    """Flags over config-file values; returns a dict of option name -> raw value."""
    merged = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        kv = KV(parse_kv_file(path), str(path))
        for key, value in kv.values.items():
            merged[key.replace("-", "_")] = value
    for key, value in vars(args).items():
        if value is not None and value is not False:
            merged[key] = value
    return merged


def _experiment(opts: dict, strategy: Optional[str]) -> ExperimentConfig:
    scenario = opts.get("scenario", "desk")
    if scenario == "scheduler":
        exp = scheduler_config(Policy(opts.get("scheduler", "fcfs")))
    else:
        exp = ExperimentConfig()
    if strategy is not None:
        exp = replace(exp, strategy=Strategy(strategy))
    changes = {}
    for name, (typ, fld, scale) in _TUNABLES.items():
        if name not in opts:
            continue
        try:
            value = typ(opts[name])
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {opts[name]!r}") from None
        if name == "scheduler":
            value = Policy(value)
        elif scale is not None:
            value = int(round(value * scale))
        changes[fld] = value
    if "seed" in opts:
        changes["seed"] = int(opts["seed"])
    if "gpu" in changes and "hourly_cost" not in changes:
        changes["hourly_cost"] = catalog.GPUS[changes["gpu"]].hourly_cost
    try:
        return replace(exp, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _workload(opts: dict):
    """Requests for the chosen source plus a short description."""
    seed = int(opts["seed"]) if "seed" in opts else None
    if "trace" in opts:
        path = Path(opts["trace"])
        if not path.is_file():
            raise UsageError(f"trace not found: {path}")
        trace = ingest_trace(path)
        return trace.requests, f"trace {path} ({len(trace)} requests, {trace.unsorted} out of order)"
    if "synthetic" in opts:
        path = Path(opts["synthetic"])
        if not path.is_file():
            raise UsageError(f"synthetic spec not found: {path}")
        spec = spec_from_kv(KV(parse_kv_file(path), str(path)), catalog.token_dists(catalog.MODELS))
        if seed is not None:
            spec = replace(spec, seed=seed)
        return generate_synthetic(spec), f"synthetic {path}"
    scenario = opts.get("scenario", "desk")
    seed = seed or 0
    if scenario == "burst":
        spec = burst_workload(seed=seed)
    elif scenario == "scheduler":
        spec = scheduler_workload(seed=seed)
    else:
        spec = desk_workload(seed=seed, gpu=opts.get("gpu", "h100"))
    return generate_synthetic(spec), f"built-in {scenario} scenario (seed {seed})"


def _finish(results, opts: dict, out: Path) -> None:
    if opts.get("figures"):
        from .report import render_figures
        render_figures(results, out)
    for res in results:
        row = summarize(res)
        print(f"{row['strategy']:>9}: {row['instance_hours']:.2f} instance-hours, waste {row['waste_gpu_hours']:.2f} "
              f"GPU-h, P95 TTFT IW {row['p95_ttft_ms_iw']} ms, {res.wall_sec:.1f} s")
    print(f"wrote {out}")


def cmd_run(args, opts) -> int:
    exp = _experiment(opts, opts.get("strategy", "reactive"))
    requests, desc = _workload(opts)
    out = Path(opts.get("out", "fleetsim-out"))
    print(desc)
    results = run_experiment(exp, requests, out, dump_requests=bool(opts.get("dump_requests")))
    _finish(results, opts, out)
    return 0


def cmd_compare(args, opts) -> int:
    names = opts.get("strategies", "reactive,lt-i,lt-u,lt-ua")
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    try:
        strategies = [Strategy(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    exp = _experiment(opts, None)
    requests, desc = _workload(opts)
    out = Path(opts.get("out", "fleetsim-out"))
    print(desc)
    results = run_experiment(exp, requests, out, strategies, dump_requests=bool(opts.get("dump_requests")))
    _finish(results, opts, out)
    return 0


def cmd_gen_trace(args, opts) -> int:
    requests, desc = _workload(opts)
    path = Path(opts["output"]) if "output" in opts else Path(opts.get("out", ".")) / "trace.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    export_trace(requests, path)
    print(f"{desc}: wrote {len(requests)} requests to {path}")
    return 0


def cmd_validate(args, opts) -> int:
    if "trace" not in opts:
        raise UsageError("validate-trace needs --trace")
    path = Path(opts["trace"])
    if not path.is_file():
        raise UsageError(f"trace not found: {path}")
    try:
        trace = ingest_trace(path, strict=not args.lenient)
    except ParseError as exc:
        print(f"invalid trace: {exc}", file=sys.stderr)
        return 1
    counts = {}
    for r in trace.requests:
        counts[r.tier.value] = counts.get(r.tier.value, 0) + 1
    print(f"{path}: {len(trace)} requests, {trace.unsorted} out of order, {trace.skipped} skipped")
    for tier in sorted(counts):
        print(f"  {tier}: {counts[tier]}")
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "gen-trace": cmd_gen_trace, "validate-trace": cmd_validate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _merged(args)
        return COMMANDS[args.command](args, opts)
    except UsageError as exc:
        print(f"fleetsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParseError, FleetSimError, ValueError) as exc:
        print(f"fleetsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
