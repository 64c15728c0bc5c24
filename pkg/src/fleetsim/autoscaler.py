"""Scaling strategies and the control plane that drives them.

The step functions are pure: they take the observed state of one endpoint and
return +1, -1 or 0. :class:`Autoscaler` wires them to the simulator, runs the
hourly forecast and capacity plan, and turns decisions into provisioning or
drain actions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .domain import HOUR, MINUTE, SECOND
from .engine import ControlPlane, Endpoint, NoCapacity, Simulator
from .forecast import Forecast, Forecaster, compute_buffer
from .metrics import ScaleEvent
from .optimizer import OptimizerConfig, apply_floor_and_caps, objective, solve


class Strategy(enum.Enum):
    STATIC = "static"
    SILOED = "siloed"
    REACTIVE = "reactive"
    LT_I = "lt-i"
    LT_U = "lt-u"
    LT_UA = "lt-ua"

    @property
    def long_term(self) -> bool:
        return self in (Strategy.LT_I, Strategy.LT_U, Strategy.LT_UA)


class Source(enum.Enum):
    SPOT_SAME = "spot-same"
    SPOT_OTHER = "spot-other"
    FRESH = "fresh"


@dataclass(frozen=True)
class LtUaConfig:
    window_tail: int = 20 * MINUTE
    over_factor: float = 5.0
    under_factor: float = 0.5

    def __post_init__(self):
        if self.over_factor <= 0 or self.under_factor <= 0:
            raise ValueError("LT-UA factors must be positive")


@dataclass(frozen=True)
class ScalerConfig:
    strategy: Strategy = Strategy.REACTIVE
    up_threshold: float = 0.70
    down_threshold: float = 0.30
    cooldown: int = 15 * SECOND
    lt_ua: LtUaConfig = field(default_factory=LtUaConfig)
    # trailing window for the observed side of the LT-UA ratio
    ratio_window: int = 5 * MINUTE
    # initial IW/NIW split of each endpoint under the siloed baseline
    siloed_split: Tuple[int, int] = (16, 4)
    buffer_fraction: float = 0.10

    def __post_init__(self):
        if not 0 < self.down_threshold < self.up_threshold < 1:
            raise ValueError("need 0 < down_threshold < up_threshold < 1")
        if self.cooldown < 0:
            raise ValueError("cooldown must be non-negative")


def reactive_step(utilization: float, n: int, now: int, last_action: int, cfg: ScalerConfig,
                  floor: int, cap: int) -> int:
    """+1 above the up threshold, -1 below the down threshold, subject to cooldown and bounds."""
    if now - last_action < cfg.cooldown:
        return 0
    if utilization > cfg.up_threshold and n < cap:
        return +1
    if utilization < cfg.down_threshold and n > floor:
        return -1
    return 0


@dataclass(frozen=True)
class LtDecision:
    action: int
    reason: str = ""
    floor_conflict: bool = False


def lt_step(strategy: Strategy, target: int, n: int, utilization: float, observed_tps: float,
            predicted_tps: float, now: int, last_action: int, cfg: ScalerConfig, floor: int, cap: int,
            minute_of_hour: float = 0.0) -> LtDecision:
    """One utilization-triggered step toward (or, for LT-UA late in the hour, past) the plan target.

    LT-I returns the whole jump ``target - n`` and ignores utilization.
    """
    if strategy is Strategy.LT_I:
        goal = min(max(target, floor), cap)
        return LtDecision(goal - n, "plan")
    if now - last_action < cfg.cooldown:
        return LtDecision(0)
    up = utilization > cfg.up_threshold
    down = utilization < cfg.down_threshold
    if up and n < min(target, cap):
        return LtDecision(+1, "toward-target")
    if down and n > max(target, floor):
        return LtDecision(-1, "toward-target")
    if strategy is Strategy.LT_UA and minute_of_hour * MINUTE >= HOUR - cfg.lt_ua.window_tail:
        ratio = observed_tps / predicted_tps if predicted_tps > 0 else (np.inf if observed_tps > 0 else 1.0)
        if up and n >= target and ratio >= cfg.lt_ua.over_factor and n < cap:
            return LtDecision(+1, "over-forecast")
        if down and n <= target and ratio <= cfg.lt_ua.under_factor:
            if n > floor:
                return LtDecision(-1, "under-forecast")
            return LtDecision(0, "under-forecast", floor_conflict=True)
    return LtDecision(0)


def siloed_step(pools: Mapping[str, Tuple[float, int, int]], now: int, cfg: ScalerConfig, floor: int,
                cap: int) -> Dict[str, int]:
    """Reactive scaling applied to each pool on its own.

    ``pools`` maps pool name to (utilization, n, last action time). Pools never
    lend capacity to each other.
    """
    return {name: reactive_step(u, n, now, last, cfg, floor, cap) for name, (u, n, last) in sorted(pools.items())}


def source_capacity(model: str, spot_counts: Mapping[str, int], vm_count: int, vm_limit: int
                    ) -> Tuple[Source, Optional[str]]:
    """Where the next instance of ``model`` comes from, and which model donates it.

    Same-model spot instances first, then another model's spot instance (the
    model with the most spare instances, ties by id), then a new VM while the
    region is under its limit.
    """
    if spot_counts.get(model, 0) > 0:
        return Source.SPOT_SAME, model
    donors = sorted((m for m, c in spot_counts.items() if c > 0 and m != model),
                    key=lambda m: (-spot_counts[m], m))
    if donors:
        return Source.SPOT_OTHER, donors[0]
    if vm_count < vm_limit:
        return Source.FRESH, None
    raise NoCapacity(f"no spot instance and no free VM for {model}")


class Autoscaler(ControlPlane):
    """Control plane for every strategy except the fixed fleet."""

    def __init__(self, cfg: ScalerConfig, forecaster: Optional[Forecaster] = None,
                 epsilon: float = 0.6, solver_budget_sec: float = 30.0):
        self.cfg = cfg
        self.strategy = cfg.strategy
        self.name = cfg.strategy.value
        self.siloed = cfg.strategy is Strategy.SILOED
        self.forecaster = forecaster or Forecaster()
        self.epsilon = epsilon
        self.solver_budget_sec = solver_budget_sec
        self.forecasts: Dict[Tuple[str, str], Forecast] = {}
        self.plan_hour: Optional[int] = None
        self.sim: Optional[Simulator] = None

    # -- wiring ------------------------------------------------------------

    def attach(self, sim: Simulator) -> None:
        self.sim = sim
        self.floor = sim.cfg.min_instances
        self.cap = sim.cfg.max_instances

    def _scale_up(self, sim: Simulator, ep: Endpoint, now: int, reason: str, target=None, ratio=None) -> bool:
        region = ep.region
        counts = {m: len(v) for m, v in sim.spot_pool(region, ep.pool).items()}
        try:
            source, donor = source_capacity(ep.model, counts, sim.region_vm_count(region),
                                            sim.cfg.regions[region].capacity_limit)
            sim.provision(ep, source.value, now, donor_model=donor)
        except NoCapacity:
            sim.ledger.bump("no_capacity")
            return False
        ep.last_action = now
        sim.ledger.scale_events.append(_event(now, ep, "up", reason, target, ratio, source.value))
        return True

    def _scale_down(self, sim: Simulator, ep: Endpoint, now: int, reason: str, target=None, ratio=None) -> bool:
        victim = sim.pick_victim(ep)
        if victim is None:
            return False
        sim.begin_drain(victim, now)
        ep.last_action = now
        sim.ledger.scale_events.append(_event(now, ep, "down", reason, target, ratio))
        return True

    def _apply(self, sim, ep, now, step: int, reason: str, target=None, ratio=None) -> None:
        if step > 0:
            for _ in range(step):
                if not self._scale_up(sim, ep, now, reason, target, ratio):
                    break
        elif step < 0:
            for _ in range(-step):
                if ep.n <= self.floor or not self._scale_down(sim, ep, now, reason, target, ratio):
                    break

    # -- triggers ----------------------------------------------------------

    def on_arrival(self, sim: Simulator, ep: Endpoint, now: int) -> None:
        self._decide(sim, ep, now)

    def on_sample(self, sim: Simulator, now: int) -> None:
        for key in sorted(sim.endpoints):
            self._decide(sim, sim.endpoints[key], now)

    def _decide(self, sim: Simulator, ep: Endpoint, now: int) -> None:
        s = self.strategy
        if s is Strategy.STATIC or not ep.serving:
            return
        util = ep.utilization()
        if s in (Strategy.REACTIVE, Strategy.SILOED) or ep.target is None:
            step = reactive_step(util, ep.n, now, ep.last_action, self.cfg, self.floor, self.cap)
            self._apply(sim, ep, now, step, "reactive")
            return
        if s is Strategy.LT_I:
            return  # moves only when a plan lands
        minute = (now % HOUR) / MINUTE
        observed = predicted = 0.0
        if s is Strategy.LT_UA and now % HOUR >= HOUR - self.cfg.lt_ua.window_tail:
            observed = self.observed_tps(sim, ep.model, ep.region)
            fc = self.forecasts.get((ep.model, ep.region))
            predicted = fc.at(int(minute)) if fc is not None else 0.0
        d = lt_step(s, ep.target, ep.n, util, observed, predicted, now, ep.last_action, self.cfg,
                    self.floor, self.cap, minute)
        if d.floor_conflict and now - getattr(ep, "last_conflict", -HOUR) >= self.cfg.cooldown:
            sim.ledger.bump("floor_conflicts")
            ep.last_conflict = now
        ratio = observed / predicted if predicted > 0 else None
        self._apply(sim, ep, now, d.action, d.reason, ep.target, ratio)

    @staticmethod
    def demand_history(sim: Simulator, key: Tuple[str, str], last: Optional[int] = None) -> List[float]:
        """Per-minute input TPS requested by clients of ``key``, IW and NIW together."""
        iw, niw = sim.iw_tps.get(key, []), sim.niw_tps.get(key, [])
        if last is not None:
            iw, niw = iw[-last:], niw[-last:]
        return [a + b for a, b in zip(iw, niw)]

    def observed_tps(self, sim: Simulator, model: str, region: str) -> float:
        window = max(1, self.cfg.ratio_window // MINUTE)
        tail = self.demand_history(sim, (model, region), window)
        return sum(tail) / len(tail) if tail else 0.0

    # -- hourly plan -------------------------------------------------------

    def on_hour(self, sim: Simulator, now: int) -> None:
        if not self.strategy.long_term:
            return
        hour = now // HOUR
        theta, n, demand, gpus = {}, {}, {}, {}
        for ep in sorted(sim.endpoints.values(), key=lambda e: e.key):
            key = (ep.model, ep.region)
            history = self.demand_history(sim, key)
            fc = self.forecaster.predict(history)
            fc.buffer = compute_buffer(sim.niw_tps.get(key, [])[-60:], self.cfg.buffer_fraction)
            self.forecasts[key] = fc
            demand.setdefault(ep.model, {})[ep.region] = fc.values + fc.buffer
            theta[ep.model, ep.gpu] = sim.perf.instance_tps(ep.model, ep.gpu)
            n[ep.model, ep.region, ep.gpu] = ep.n
            gpus[ep.gpu] = sim.cfg.gpus[ep.gpu]
        alpha = {g: gpu.hourly_cost for g, gpu in gpus.items()}
        sigma = {(m, g): alpha[g] * sim.cfg.models[m].local_deploy_delay / HOUR for (m, g) in theta}
        cfg = OptimizerConfig(self.epsilon, alpha, sigma, self.solver_budget_sec)
        lo = {k: -v for k, v in n.items()}
        hi = {k: self.cap - v for k, v in n.items()}
        plan = solve(n, demand, theta, cfg, lo, hi)
        if not plan.optimal:
            sim.ledger.bump("solver_timeouts")
        if plan.infeasible:
            sim.ledger.bump("plan_infeasible", len(plan.infeasible))
        limits = {r: reg.capacity_limit for r, reg in sim.cfg.regions.items()}
        clamped, changed = apply_floor_and_caps(plan.delta, n, self.floor, self.cap, limits)
        if changed:
            sim.ledger.bump("plan_clamps", changed)
        gamma, mu, _total = objective(clamped, cfg)
        if (gamma, mu) != (plan.gamma, plan.mu):
            sim.ledger.bump("clamp_changed_objective")
        for (model, region, gpu), d in sorted(clamped.items()):
            sim.ledger.plans.append((hour, model, region, gpu, d, round(gamma, 6), round(mu, 6)))
            ep = sim.endpoints[model, region, sim.iw_pool]
            ep.target = n[model, region, gpu] + d
            if self.strategy is Strategy.LT_I:
                step = lt_step(Strategy.LT_I, ep.target, ep.n, 0.0, 0.0, 0.0, now, ep.last_action, self.cfg,
                               self.floor, self.cap).action
                self._apply(sim, ep, now, step, "plan", ep.target)
        self.plan_hour = hour


def _event(now, ep, action, reason, target, ratio, source=None):
    return ScaleEvent(now, ep.model, ep.region, ep.pool, action, reason, ep.n, target, ratio, source)
