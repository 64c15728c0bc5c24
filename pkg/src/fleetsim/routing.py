"""Request routing: region selection, deployment/instance selection, queue order.

Queue ordering works on any objects exposing ``arrival_ts``, ``tier``,
``priority`` and ``remaining_ttft(now)``; the simulator's jobs and plain
:class:`~fleetsim.domain.Request` values both qualify.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

from .domain import SECOND, FleetSimError, WorkloadTier


class ModelNowhereDeployed(FleetSimError):
    pass


class NoInstances(FleetSimError):
    pass


class Policy(enum.Enum):
    FCFS = "fcfs"
    EDF = "edf"
    PF = "pf"
    DPA = "dpa"


@dataclass(frozen=True)
class SchedulerConfig:
    policy: Policy = Policy.FCFS
    tau_n: int = 60 * SECOND
    tau_p: int = 10 * SECOND

    def __post_init__(self):
        if self.tau_n < 0 or self.tau_p < 0:
            raise ValueError("tau_n and tau_p must be non-negative")


@dataclass(frozen=True)
class RegionRoutingConfig:
    utilization_threshold: float = 0.70
    # client region -> ordered candidate regions; missing entries fall back to latency order
    preference_order: Mapping[str, Sequence[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.utilization_threshold <= 1:
            raise ValueError("utilization_threshold must be in (0, 1]")


def effective_utilization(used: Sequence[float], capacity: Sequence[float]) -> float:
    """Summed KV memory in use over summed effective memory."""
    if not capacity:
        raise NoInstances("no private instances")
    total = sum(capacity)
    if total <= 0:
        raise NoInstances("no effective memory")
    return sum(used) / total


def route_global_iw(preference: Sequence[str], utilization: Mapping[str, float],
                    threshold: float = 0.70) -> str:
    """Pick a serving region for an interactive request.

    ``utilization`` holds only regions with at least one private instance of
    the model. The first preferred region under ``threshold`` wins; otherwise
    the least-utilized region, ties broken by preference order.
    """
    candidates = [r for r in preference if r in utilization]
    candidates += sorted(r for r in utilization if r not in preference)
    if not candidates:
        raise ModelNowhereDeployed("model has no private instances in any region")
    for region in candidates:
        if utilization[region] < threshold:
            return region
    best = candidates[0]
    for region in candidates[1:]:
        if utilization[region] < utilization[best]:
            best = region
    return best


def route_to_instance(remaining_tokens: Sequence[int], ids: Optional[Sequence[int]] = None) -> int:
    """Join-the-shortest-queue: index of the minimum remaining-token count.

    Ties go to the lowest instance id (or lowest index when ids are omitted).
    """
    if not remaining_tokens:
        raise NoInstances("empty deployment")
    best = 0
    for i in range(1, len(remaining_tokens)):
        if remaining_tokens[i] < remaining_tokens[best] or (
                remaining_tokens[i] == remaining_tokens[best] and ids is not None and ids[i] < ids[best]):
            best = i
    return best


def _tier_rank(item) -> int:
    # NIW promoted to priority 0 is scheduled alongside the normal interactive tier
    return 0 if item.tier is WorkloadTier.IW_F else 1


def dpa_bucket(item, now: int, tau_n: int, tau_p: int) -> int:
    """Position (0-5) in the DPA service order for one queued item."""
    d = item.remaining_ttft(now)
    if d < -tau_n:
        return 0
    if d < 0:
        return 5
    fast = item.tier is WorkloadTier.IW_F
    if d <= tau_p:
        return 1 if fast else 2
    return 3 if fast else 4


def order_queue(queue: Sequence, now: int, cfg: SchedulerConfig) -> List:
    """Return the queue in service order for ``cfg.policy``.

    Priority-1 (deferred NIW) items always follow every priority-0 item; within
    each priority level the policy's key applies and sorting is stable.
    """
    policy = cfg.policy
    if policy is Policy.FCFS:
        key = lambda r: (r.priority, r.arrival_ts)
    elif policy is Policy.EDF:
        key = lambda r: (r.priority, r.remaining_ttft(now))
    elif policy is Policy.PF:
        key = lambda r: (r.priority, _tier_rank(r), r.arrival_ts)
    elif policy is Policy.DPA:
        tau_n, tau_p = cfg.tau_n, cfg.tau_p
        key = lambda r: (r.priority, dpa_bucket(r, now, tau_n, tau_p), r.arrival_ts)
    else:  # pragma: no cover
        raise ValueError(policy)
    return sorted(queue, key=key)


def latency_preference(client: str, regions: Sequence[str],
                       mean_latency: Callable[[str, str], float]) -> List[str]:
    """Default preference order: ascending mean latency from the client region."""
    return sorted(regions, key=lambda r: (mean_latency(client, r), r))
