"""Shared vocabulary: tiers, requests, model/GPU/region descriptors.

All simulation times are integer milliseconds since the start of the trace.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional

SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR

GB = 1024**3


class FleetSimError(Exception):
    """Base class for all library errors."""


class InvalidRequest(FleetSimError):
    pass


class InvalidTokenCount(InvalidRequest):
    pass


class InvalidDeadline(InvalidRequest):
    pass


class UnknownModel(InvalidRequest):
    pass


class UnknownRegion(InvalidRequest):
    pass


class UnknownTier(InvalidRequest):
    pass


class WorkloadTier(enum.Enum):
    IW_F = "IW-F"
    IW_N = "IW-N"
    NIW = "NIW"

    @classmethod
    def parse(cls, text: str) -> "WorkloadTier":
        for tier in cls:
            if text == tier.value or text == tier.name:
                return tier
        raise UnknownTier(f"unknown workload tier {text!r}")

    @property
    def interactive(self) -> bool:
        return self is not WorkloadTier.NIW


@dataclass(frozen=True)
class SlaDefaults:
    """TTFT budgets for interactive tiers and the NIW completion deadline (ms)."""

    iw_f_ttft: int = 1 * SECOND
    iw_n_ttft: int = 60 * SECOND
    niw_deadline: int = 24 * HOUR

    def ttft_budget(self, tier: WorkloadTier) -> Optional[int]:
        if tier is WorkloadTier.IW_F:
            return self.iw_f_ttft
        if tier is WorkloadTier.IW_N:
            return self.iw_n_ttft
        return None


@dataclass(frozen=True)
class Request:
    id: int
    arrival_ts: int
    client_region: str
    tier: WorkloadTier
    model: str
    input_tokens: int
    output_tokens: int
    ttft_deadline: Optional[int]
    completion_deadline: int
    priority: int = 0

    def remaining_ttft(self, now: int) -> int:
        """Time left until the TTFT deadline (negative once expired).

        NIW requests carry no TTFT deadline; their completion deadline stands in.
        """
        deadline = self.ttft_deadline if self.ttft_deadline is not None else self.completion_deadline
        return deadline - now

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


def make_request(
    id: int,
    arrival_ts: int,
    client_region: str,
    tier: WorkloadTier,
    model: str,
    input_tokens: int,
    output_tokens: int,
    sla: SlaDefaults = SlaDefaults(),
) -> Request:
    """Build a request with deadlines and initial priority derived from ``sla``."""
    budget = sla.ttft_budget(tier)
    if tier is WorkloadTier.NIW:
        return Request(id, arrival_ts, client_region, tier, model, input_tokens, output_tokens,
                       None, arrival_ts + sla.niw_deadline, priority=1)
    # IW has no enforced E2E SLA; the completion deadline is informational only.
    return Request(id, arrival_ts, client_region, tier, model, input_tokens, output_tokens,
                   arrival_ts + budget, arrival_ts + sla.niw_deadline, priority=0)


@dataclass(frozen=True)
class ModelType:
    id: str
    weights_bytes: int
    gpus_per_instance: int = 8
    local_deploy_delay: int = 10 * MINUTE
    remote_deploy_delay: int = 2 * HOUR
    weight_locality: frozenset = frozenset()
    # KV-cache bytes held per token of context; None means "derive from GPU memory".
    kv_bytes_per_token: Optional[int] = None
    max_context_tokens: int = 32768

    def __post_init__(self):
        if self.local_deploy_delay <= 0 or self.remote_deploy_delay <= 0:
            raise ValueError(f"{self.id}: deploy delays must be positive")
        if self.gpus_per_instance < 1:
            raise ValueError(f"{self.id}: gpus_per_instance must be >= 1")

    def weights_local(self, region: str) -> bool:
        return not self.weight_locality or region in self.weight_locality


@dataclass(frozen=True)
class GpuType:
    id: str
    vm_total_memory_bytes: int
    hourly_cost: float
    vm_acquire_delay: int = 5 * MINUTE

    def __post_init__(self):
        if self.hourly_cost <= 0:
            raise ValueError(f"{self.id}: hourly_cost must be positive")


@dataclass(frozen=True)
class LatencyDist:
    """Inter-region one-way latency: a jittered base with a rare long tail."""

    base_ms: int = 50
    jitter_ms: int = 20
    tail_prob: float = 0.02
    tail_ms: int = 2500

    def sample(self, rng) -> int:
        """Draw one latency using a :class:`random.Random`."""
        if self.base_ms == 0 and self.tail_prob == 0:
            return 0
        if self.tail_prob and rng.random() < self.tail_prob:
            return self.tail_ms
        return self.base_ms + rng.randint(0, self.jitter_ms) if self.jitter_ms else self.base_ms

    @property
    def mean_ms(self) -> float:
        return (1 - self.tail_prob) * (self.base_ms + self.jitter_ms / 2) + self.tail_prob * self.tail_ms


ZERO_LATENCY = LatencyDist(0, 0, 0.0, 0)


@dataclass(frozen=True)
class Region:
    id: str
    inter_region_latency: Mapping[str, LatencyDist] = field(default_factory=dict)
    capacity_limit: int = 10**6

    def latency_to(self, other: str) -> LatencyDist:
        if other == self.id:
            return ZERO_LATENCY
        return self.inter_region_latency.get(other, LatencyDist())


def validate_request(r: Request, models: Optional[Mapping[str, ModelType]] = None,
                     regions: Optional[Mapping[str, Region]] = None) -> None:
    """Raise an :class:`InvalidRequest` subclass unless every invariant holds."""
    if r.input_tokens < 1 or r.output_tokens < 1:
        raise InvalidTokenCount(f"request {r.id}: token counts must be >= 1")
    if not isinstance(r.tier, WorkloadTier):
        raise UnknownTier(f"request {r.id}: tier {r.tier!r}")
    if r.tier.interactive:
        if r.ttft_deadline is None or r.ttft_deadline < r.arrival_ts:
            raise InvalidDeadline(f"request {r.id}: TTFT deadline precedes arrival")
        if r.priority != 0:
            raise InvalidRequest(f"request {r.id}: interactive requests have priority 0")
    elif r.ttft_deadline is not None:
        raise InvalidDeadline(f"request {r.id}: NIW requests carry no TTFT deadline")
    if r.completion_deadline < r.arrival_ts:
        raise InvalidDeadline(f"request {r.id}: completion deadline precedes arrival")
    if r.priority not in (0, 1):
        raise InvalidRequest(f"request {r.id}: priority must be 0 or 1")
    if models is not None:
        model = models.get(r.model)
        if model is None:
            raise UnknownModel(f"request {r.id}: model {r.model!r}")
        if r.total_tokens > model.max_context_tokens:
            raise InvalidTokenCount(
                f"request {r.id}: {r.total_tokens} tokens exceed {r.model} context {model.max_context_tokens}")
    if regions is not None and r.client_region not in regions:
        raise UnknownRegion(f"request {r.id}: region {r.client_region!r}")
