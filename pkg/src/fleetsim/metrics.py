"""Append-only run ledger and the aggregations computed from it."""

from __future__ import annotations

import hashlib
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .domain import HOUR, FleetSimError, WorkloadTier

PRIVATE_ROLES = ("provisioning", "private", "draining", "switching")


class EmptySet(FleetSimError):
    pass


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (1-based)."""
    if not len(values):
        raise EmptySet("percentile of an empty set")
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class RequestRecord:
    id: int
    tier: WorkloadTier
    model: str
    client_region: str
    arrival_ts: int
    input_tokens: int
    output_tokens: int
    ttft_deadline: Optional[int]
    completion_deadline: int
    served_region: Optional[str] = None
    instance_id: Optional[int] = None
    routed_ts: Optional[int] = None
    dequeued_ts: Optional[int] = None
    first_token_ts: Optional[int] = None
    completed_ts: Optional[int] = None
    escalated: bool = False
    force_released: bool = False

    @property
    def ttft(self) -> Optional[int]:
        return None if self.first_token_ts is None else self.first_token_ts - self.arrival_ts

    @property
    def e2e(self) -> Optional[int]:
        return None if self.completed_ts is None else self.completed_ts - self.arrival_ts

    def violated(self) -> bool:
        if self.tier is WorkloadTier.NIW:
            return self.completed_ts is None or self.completed_ts > self.completion_deadline
        return self.first_token_ts is None or self.first_token_ts > self.ttft_deadline


@dataclass
class InstanceRecord:
    id: int
    model: str
    region: str
    gpu: str
    gpus: int
    pool: str
    # (role, start_ms, end_ms or None while open)
    intervals: List[list] = field(default_factory=list)

    def enter(self, role: str, ts: int) -> None:
        if self.intervals and self.intervals[-1][2] is None:
            self.intervals[-1][2] = ts
        self.intervals.append([role, ts, None])

    def close(self, ts: int) -> None:
        if self.intervals and self.intervals[-1][2] is None:
            self.intervals[-1][2] = ts

    @property
    def role(self) -> Optional[str]:
        if self.intervals and self.intervals[-1][2] is None:
            return self.intervals[-1][0]
        return None

    def time_in(self, roles: Iterable[str], end: int) -> int:
        roles = set(roles)
        total = 0
        for role, start, stop in self.intervals:
            if role in roles:
                total += (end if stop is None else stop) - start
        return total


@dataclass
class ProvisionRecord:
    instance_id: int
    model: str
    region: str
    gpus: int
    source: str
    start: int
    end: int


@dataclass
class ScaleEvent:
    ts: int
    model: str
    region: str
    pool: str
    action: str          # "up" | "down"
    reason: str          # strategy rule that fired
    n_after: int
    target: Optional[int] = None
    ratio: Optional[float] = None
    source: Optional[str] = None


class MetricsLedger:
    """Everything a run records. Nothing is removed once appended."""

    def __init__(self):
        self.requests: Dict[int, RequestRecord] = {}
        self.instances: Dict[int, InstanceRecord] = {}
        self.provisions: List[ProvisionRecord] = []
        self.scale_events: List[ScaleEvent] = []
        # (ts, model, region, pool, +1/-1) whenever a private-role count changes
        self.count_changes: List[Tuple[int, str, str, str, int]] = []
        # (model, region) -> per-minute mean effective utilization
        self.util_minutes: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        self.plans: List[tuple] = []
        self.counters: Dict[str, int] = defaultdict(int)
        self.end_ts = 0

    # -- recording ---------------------------------------------------------

    def add_request(self, rec: RequestRecord) -> None:
        if rec.id in self.requests:
            raise FleetSimError(f"duplicate request id {rec.id}")
        self.requests[rec.id] = rec

    def add_instance(self, rec: InstanceRecord) -> None:
        self.instances[rec.id] = rec

    def count_change(self, ts: int, model: str, region: str, pool: str, delta: int) -> None:
        self.count_changes.append((ts, model, region, pool, delta))

    def bump(self, name: str, by: int = 1) -> None:
        self.counters[name] += by

    def close(self, end_ts: int) -> None:
        # open role intervals are measured up to end_ts rather than closed
        self.end_ts = end_ts

    # -- aggregation -------------------------------------------------------

    def _scoped(self, model: Optional[str], region: Optional[str]):
        for inst in self.instances.values():
            if (model is None or inst.model == model) and (region is None or inst.region == region):
                yield inst

    def instance_hours(self, model: Optional[str] = None, region: Optional[str] = None) -> float:
        """Private-instance hours summed over per-instance lifetimes."""
        ms = sum(i.time_in(PRIVATE_ROLES, self.end_ts) for i in self._scoped(model, region))
        return ms / HOUR

    def instance_hours_from_counts(self, model: Optional[str] = None, region: Optional[str] = None) -> float:
        """Same quantity as :meth:`instance_hours`, integrated from the count step function."""
        changes = sorted((c for c in self.count_changes
                          if (model is None or c[1] == model) and (region is None or c[2] == region)),
                         key=lambda c: c[0])
        total, level, last = 0, 0, 0
        for ts, _m, _r, _p, delta in changes:
            total += level * (ts - last)
            level += delta
            last = ts
        total += level * (self.end_ts - last)
        return total / HOUR

    def spot_hours(self) -> float:
        return sum(i.time_in(("spot",), self.end_ts) for i in self.instances.values()) / HOUR

    def count_series(self, bin_ms: int) -> Dict[Tuple[str, str], List[float]]:
        """Time-averaged private instance count per bin, per (model, region)."""
        nbins = max(1, math.ceil(self.end_ts / bin_ms))
        out: Dict[Tuple[str, str], List[float]] = {}
        groups: Dict[Tuple[str, str], list] = defaultdict(list)
        for c in self.count_changes:
            groups[c[1], c[2]].append(c)
        for key, changes in sorted(groups.items()):
            changes.sort(key=lambda c: c[0])
            area = [0] * nbins
            level, last = 0, 0
            for ts, *_rest, delta in changes + [(self.end_ts, None, None, None, 0)]:
                t = last
                while t < ts:
                    b = min(t // bin_ms, nbins - 1)
                    stop = min(ts, (b + 1) * bin_ms)
                    area[b] += level * (stop - t)
                    t = stop
                level += delta
                last = ts
            widths = [min(bin_ms, self.end_ts - b * bin_ms) or bin_ms for b in range(nbins)]
            out[key] = [a / w for a, w in zip(area, widths)]
        return out

    def records(self, tier: Optional[WorkloadTier] = None, model: Optional[str] = None) -> List[RequestRecord]:
        return [r for r in self.requests.values()
                if (tier is None or r.tier is tier) and (model is None or r.model == model)]

    def dump(self, fh) -> None:
        """Canonical text serialization; identical runs produce identical bytes."""
        w = fh.write
        for rid in sorted(self.requests):
            r = self.requests[rid]
            w(f"R,{r.id},{r.tier.value},{r.model},{r.client_region},{r.served_region},{r.instance_id},"
              f"{r.arrival_ts},{r.routed_ts},{r.dequeued_ts},{r.first_token_ts},{r.completed_ts},"
              f"{int(r.escalated)},{int(r.force_released)}\n")
        for iid in sorted(self.instances):
            i = self.instances[iid]
            spans = ";".join(f"{role}:{a}:{b}" for role, a, b in i.intervals)
            w(f"I,{i.id},{i.model},{i.region},{i.gpu},{i.pool},{spans}\n")
        for p in self.provisions:
            w(f"P,{p.instance_id},{p.model},{p.region},{p.source},{p.start},{p.end}\n")
        for e in self.scale_events:
            w(f"S,{e.ts},{e.model},{e.region},{e.pool},{e.action},{e.reason},{e.n_after},{e.target},{e.source}\n")
        for key in sorted(self.util_minutes):
            w(f"U,{key[0]},{key[1]}," + ",".join(f"{u:.6f}" for u in self.util_minutes[key]) + "\n")
        for row in self.plans:
            w("L," + ",".join(str(x) for x in row) + "\n")
        for name in sorted(self.counters):
            w(f"C,{name},{self.counters[name]}\n")
        w(f"E,{self.end_ts}\n")

    def digest(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def scaling_waste_hours(ledger: MetricsLedger) -> float:
    """GPU-hours spent provisioning: sum of (done - start) x GPUs per instance."""
    return sum((p.end - p.start) * p.gpus for p in ledger.provisions) / HOUR


def sla_violation_rate(ledger: MetricsLedger, tier: WorkloadTier, model: Optional[str] = None) -> float:
    recs = ledger.records(tier, model)
    if not recs:
        return 0.0
    return sum(1 for r in recs if r.violated()) / len(recs)


def instance_hours(ledger: MetricsLedger, model: Optional[str] = None, region: Optional[str] = None) -> float:
    return ledger.instance_hours(model, region)
