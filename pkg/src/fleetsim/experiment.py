"""Scenario assembly, experiment runs and the tabular output bundle."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import catalog
from .autoscaler import Autoscaler, ScalerConfig, Strategy
from .domain import HOUR, MINUTE, SECOND, Request, SlaDefaults, WorkloadTier
from .engine import ControlPlane, SimConfig, Simulator
from .forecast import Forecaster
from .metrics import EmptySet, MetricsLedger, percentile, scaling_waste_hours, sla_violation_rate
from .niw import NiwConfig
from .routing import Policy, RegionRoutingConfig, SchedulerConfig
from .workload import InjectedBurst, StreamSpec, SyntheticWorkloadSpec, generate_synthetic

H100_HOURLY = 98.32
TIERS = (WorkloadTier.IW_F, WorkloadTier.IW_N, WorkloadTier.NIW)

# peak private instances each large model should need per region at the desk scale
DESK_PEAKS = {"llama2-70b": (8, 5, 3), "bloom-176b": (6, 4, 3), "llama3.1-8b": (4, 3, 2),
              "llama3.2-3b": (3, 2, 2)}


@dataclass
class ExperimentConfig:
    strategy: Strategy = Strategy.REACTIVE
    scheduler: Policy = Policy.FCFS
    tau_n: int = 60 * SECOND
    tau_p: int = 10 * SECOND
    region_threshold: float = 0.70
    niw: NiwConfig = field(default_factory=NiwConfig)
    forecaster: str = "arima"
    arima_window: int = 60
    ma_window: int = 15
    epsilon: float = 0.6
    solver_budget_sec: float = 30.0
    up_threshold: float = 0.70
    down_threshold: float = 0.30
    cooldown: int = 15 * SECOND
    seed: int = 0
    decode_mode: str = "coarse"
    gpu: str = "h100"
    models: Tuple[str, ...] = tuple(catalog.MODELS)
    regions: Tuple[str, ...] = catalog.REGION_IDS
    initial_instances: int = 20
    min_instances: int = 2
    max_per_deployment: int = 3
    max_deployments: int = 10
    siloed_split: Tuple[int, int] = (16, 4)
    # VM limit per region; None means the captive fleet (models x initial instances)
    region_capacity: Optional[int] = None
    sample_period: int = 1 * SECOND
    hourly_cost: float = H100_HOURLY
    sla: SlaDefaults = field(default_factory=SlaDefaults)

    def sim_config(self, horizon: Optional[int] = None, audit: bool = False) -> SimConfig:
        limit = self.region_capacity
        if limit is None:
            limit = len(self.models) * self.initial_instances
        regions = catalog.default_regions(limit)
        regions = {r: regions[r] for r in self.regions}
        perf = catalog.default_perf_model([(m, self.gpu) for m in self.models])
        pools = None
        if self.strategy is Strategy.SILOED:
            pools = {"iw": self.siloed_split[0], "niw": self.siloed_split[1]}
        return SimConfig(
            models=catalog.models(self.models), gpus=dict(catalog.GPUS), regions=regions,
            deployments={(m, r): self.gpu for m in self.models for r in self.regions}, perf=perf,
            initial_instances=self.initial_instances, min_instances=self.min_instances,
            max_per_deployment=self.max_per_deployment, max_deployments=self.max_deployments,
            sample_period=self.sample_period, decode_mode=self.decode_mode,
            scheduler=SchedulerConfig(self.scheduler, self.tau_n, self.tau_p),
            routing=RegionRoutingConfig(self.region_threshold), niw=self.niw, sla=self.sla, seed=self.seed,
            pools=pools, horizon=horizon, audit=audit)

    def control_plane(self) -> ControlPlane:
        if self.strategy is Strategy.STATIC:
            return ControlPlane()
        scaler = ScalerConfig(self.strategy, self.up_threshold, self.down_threshold, self.cooldown,
                              siloed_split=self.siloed_split)
        return Autoscaler(scaler, Forecaster(self.forecaster, self.arima_window, self.ma_window),
                          self.epsilon, self.solver_budget_sec)


def desk_workload(seed: int = 0, days: float = 1.0, gpu: str = "h100", niw_ratio: float = 1 / 3,
                  amplitude: float = 0.6, burst_probability: float = 0.002, scale: float = 1.0,
                  models: Sequence[str] = tuple(catalog.MODELS), regions: Sequence[str] = catalog.REGION_IDS,
                  injected: Sequence[InjectedBurst] = ()) -> SyntheticWorkloadSpec:
    """One-day diurnal workload sized so each model peaks near ``DESK_PEAKS`` instances per region.

    NIW arrives at ``niw_ratio`` of the mean IW rate with no daily cycle; IW is
    split 45/55 between the fast and normal tiers.
    """
    capacity = catalog.default_capacity()
    streams = {}
    for model in models:
        dist = catalog.MODELS[model].tokens
        for j, region in enumerate(regions):
            peak_rps = DESK_PEAKS[model][j % 3] * capacity.tps[model, gpu] / dist.mean_input
            iw = scale * peak_rps / (1 + amplitude + niw_ratio)
            for tier, share in ((WorkloadTier.IW_F, 0.45), (WorkloadTier.IW_N, 0.55)):
                streams[model, region, tier] = StreamSpec(iw * share, amplitude, 0.6, burst_probability, 2.0)
            streams[model, region, WorkloadTier.NIW] = StreamSpec(iw * niw_ratio, 0.0, 1.0)
    return SyntheticWorkloadSpec(days, streams, catalog.token_dists(models), seed, start_weekday=1,
                                 injected=list(injected))


def burst_workload(seed: int = 0, model: str = "llama2-70b", region: str = "east", start: int = 13 * HOUR + 35 * MINUTE,
                   duration: int = 20 * MINUTE, multiplier: float = 8.0) -> SyntheticWorkloadSpec:
    """The desk workload with one injected surge on a single (model, region) stream."""
    return desk_workload(seed=seed, injected=[InjectedBurst(model, region, start, duration, multiplier)])


def scheduler_workload(seed: int = 0, model: str = "llama2-70b", region: str = "east", instances: int = 4,
                       hours: int = 24, load: float = 0.7, fast_share: float = 0.3, multiplier: float = 2.0,
                       surge: int = 15 * MINUTE, gpu: str = "h100") -> SyntheticWorkloadSpec:
    """A flat IW-only stream on a fixed fleet with a surge every hour.

    The base rate keeps ``instances`` at ``load`` of their planned capacity; the
    hourly surge pushes the fleet past saturation long enough for queues to form
    and drain, which is the regime where queue order decides who misses an SLA.
    """
    capacity = catalog.default_capacity().tps[model, gpu]
    rps = load * instances * capacity / catalog.MODELS[model].tokens.mean_input
    streams = {(model, region, WorkloadTier.IW_F): StreamSpec(rps * fast_share, 0.0, 1.0),
               (model, region, WorkloadTier.IW_N): StreamSpec(rps * (1 - fast_share), 0.0, 1.0)}
    injected = [InjectedBurst(model, region, (h * 60 + 30) * MINUTE, surge, multiplier) for h in range(hours - 1)]
    return SyntheticWorkloadSpec(hours / 24, streams, catalog.token_dists([model]), seed, injected=injected)


def scheduler_config(policy: Policy, model: str = "llama2-70b", region: str = "east",
                     instances: int = 4) -> ExperimentConfig:
    """Static single-endpoint fleet used to compare queue policies."""
    return ExperimentConfig(strategy=Strategy.STATIC, scheduler=policy, models=(model,), regions=(region,),
                            initial_instances=instances, min_instances=instances)


@dataclass
class RunResult:
    name: str
    ledger: MetricsLedger
    wall_sec: float
    events: int


def run_once(exp: ExperimentConfig, requests: Sequence[Request], horizon: Optional[int] = None,
             name: Optional[str] = None, audit: bool = False) -> RunResult:
    sim = Simulator(exp.sim_config(horizon, audit), exp.control_plane())
    t0 = time.perf_counter()
    ledger = sim.run(requests)
    return RunResult(name or exp.strategy.value, ledger, time.perf_counter() - t0, sim.events_processed)


def _pct(values, p):
    try:
        return percentile(values, p)
    except EmptySet:
        return ""


def summarize(result: RunResult, hourly_cost: float = H100_HOURLY) -> Dict[str, object]:
    led = result.ledger
    row: Dict[str, object] = {"strategy": result.name, "requests": len(led.requests)}
    for tier in TIERS:
        row[f"requests_{_slug(tier)}"] = len(led.records(tier))
    ih = led.instance_hours()
    row["instance_hours"] = round(ih, 4)
    row["instance_hours_check"] = round(led.instance_hours_from_counts(), 4)
    row["cost"] = round(ih * hourly_cost, 2)
    row["waste_gpu_hours"] = round(scaling_waste_hours(led), 4)
    row["spot_hours"] = round(led.spot_hours(), 4)
    for tier in TIERS:
        recs = led.records(tier)
        ttft = [r.ttft for r in recs if r.ttft is not None]
        e2e = [r.e2e for r in recs if r.e2e is not None]
        s = _slug(tier)
        for p in (75, 95):
            row[f"p{p}_ttft_ms_{s}"] = _pct(ttft, p)
            row[f"p{p}_e2e_ms_{s}"] = _pct(e2e, p)
        row[f"violation_rate_{s}"] = round(sla_violation_rate(led, tier), 6)
    row["p95_ttft_ms_iw"] = _pct([r.ttft for r in led.requests.values()
                                  if r.tier.interactive and r.ttft is not None], 95)
    row["scale_ups"] = sum(1 for e in led.scale_events if e.action == "up")
    row["scale_downs"] = sum(1 for e in led.scale_events if e.action == "down")
    for name in ("niw_force_released", "niw_escalations", "plan_clamps", "plan_infeasible", "floor_conflicts",
                 "no_capacity", "perf_extrapolation", "solver_timeouts"):
        row[name] = led.counters.get(name, 0)
    row["end_ts_ms"] = led.end_ts
    row["wall_sec"] = round(result.wall_sec, 1)
    return row


def _slug(tier: WorkloadTier) -> str:
    return tier.value.lower().replace("-", "_")


def latency_bins(result: RunResult, bin_ms: int = 3 * HOUR) -> List[Dict[str, object]]:
    rows = []
    led = result.ledger
    groups: Dict[Tuple[int, WorkloadTier], List] = {}
    for r in led.requests.values():
        groups.setdefault((r.arrival_ts // bin_ms, r.tier), []).append(r)
    for (b, tier), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        ttft = [r.ttft for r in recs if r.ttft is not None]
        e2e = [r.e2e for r in recs if r.e2e is not None]
        rows.append({"strategy": result.name, "bin_start_h": b * bin_ms // HOUR, "tier": tier.value,
                     "count": len(recs), "p75_ttft_ms": _pct(ttft, 75), "p95_ttft_ms": _pct(ttft, 95),
                     "p75_e2e_ms": _pct(e2e, 75), "p95_e2e_ms": _pct(e2e, 95),
                     "violation_rate": round(sum(r.violated() for r in recs) / len(recs), 6)})
    return rows


def instance_bins(result: RunResult, bin_ms: int = 15 * MINUTE) -> List[Dict[str, object]]:
    rows = []
    for (model, region), series in sorted(result.ledger.count_series(bin_ms).items()):
        for b, v in enumerate(series):
            rows.append({"strategy": result.name, "bin_start_min": b * bin_ms // MINUTE, "model": model,
                         "region": region, "instances": round(v, 4)})
    return rows


def plan_rows(result: RunResult) -> List[Dict[str, object]]:
    return [{"strategy": result.name, "tick": t, "model": m, "region": r, "gpu": g, "delta": d, "gamma": gm,
             "mu": mu} for t, m, r, g, d, gm, mu in result.ledger.plans]


def util_rows(result: RunResult) -> List[Dict[str, object]]:
    rows = []
    for (model, region), series in sorted(result.ledger.util_minutes.items()):
        for minute, u in enumerate(series):
            rows.append({"strategy": result.name, "minute": minute, "model": model, "region": region,
                         "utilization": round(u, 6)})
    return rows


def request_rows(result: RunResult) -> List[Dict[str, object]]:
    out = []
    for rid in sorted(result.ledger.requests):
        r = result.ledger.requests[rid]
        out.append({"strategy": result.name, "id": r.id, "tier": r.tier.value, "model": r.model,
                    "client_region": r.client_region, "served_region": r.served_region,
                    "arrival_ts": r.arrival_ts, "first_token_ts": r.first_token_ts,
                    "completed_ts": r.completed_ts, "ttft_ms": r.ttft, "e2e_ms": r.e2e,
                    "violated": int(r.violated())})
    return out


def write_csv(path: Path, rows: List[Dict[str, object]], header: Optional[Sequence[str]] = None) -> None:
    header = list(header or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


PLAN_HEADER = ["strategy", "tick", "model", "region", "gpu", "delta", "gamma", "mu"]


def write_bundle(out_dir, results: Sequence[RunResult], hourly_cost: float = H100_HOURLY,
                 dump_requests: bool = False) -> Dict[str, Path]:
    """Write summary.csv, instances.csv, latency_bins.csv, plans.csv and utilization.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "summary": (out / "summary.csv", [summarize(r, hourly_cost) for r in results], None),
        "instances": (out / "instances.csv", [x for r in results for x in instance_bins(r)],
                      ["strategy", "bin_start_min", "model", "region", "instances"]),
        "latency_bins": (out / "latency_bins.csv", [x for r in results for x in latency_bins(r)],
                         ["strategy", "bin_start_h", "tier", "count", "p75_ttft_ms", "p95_ttft_ms", "p75_e2e_ms",
                          "p95_e2e_ms", "violation_rate"]),
        "plans": (out / "plans.csv", [x for r in results for x in plan_rows(r)], PLAN_HEADER),
        "utilization": (out / "utilization.csv", [x for r in results for x in util_rows(r)],
                        ["strategy", "minute", "model", "region", "utilization"]),
    }
    if dump_requests:
        files["requests"] = (out / "requests.csv", [x for r in results for x in request_rows(r)], None)
    written = {}
    for key, (path, rows, header) in files.items():
        write_csv(path, rows, header)
        written[key] = path
    return written


def run_experiment(exp: ExperimentConfig, requests: Sequence[Request], out_dir=None,
                   strategies: Optional[Sequence[Strategy]] = None, horizon: Optional[int] = None,
                   dump_requests: bool = False) -> List[RunResult]:
    """Run one or more strategies on the same requests and (optionally) write the bundle."""
    results = []
    for strategy in strategies or [exp.strategy]:
        results.append(run_once(replace(exp, strategy=strategy), requests, horizon))
    if out_dir is not None:
        write_bundle(out_dir, results, exp.hourly_cost, dump_requests)
    return results
