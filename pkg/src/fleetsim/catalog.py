"""Built-in models, GPUs, regions and the analytic performance profiles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .domain import GB, MINUTE, GpuType, LatencyDist, ModelType, Region
from .perf import (DATA_DIR, AnalyticCalibration, CapacityTable, PerfModel, ProfileTable, analytic_profile,
                   load_capacity_csv, reference_point)
from .workload import TokenDist

# Effective KV capacity of one instance in tokens under the default sizing rule
# (3 x 8k tokens occupy a quarter of effective memory).
EFFECTIVE_CAPACITY_TOKENS = 4 * 3 * 8192
MAX_CONTEXT = 32768


@dataclass(frozen=True)
class ModelSpec:
    model: ModelType
    prefill_tps: float
    tokens: TokenDist


MODELS: Dict[str, ModelSpec] = {
    "llama2-70b": ModelSpec(ModelType("llama2-70b", 140 * GB), 21000.0,
                            TokenDist(2500, 0.8, 300, 0.8, MAX_CONTEXT)),
    "bloom-176b": ModelSpec(ModelType("bloom-176b", 352 * GB), 9000.0,
                            TokenDist(2500, 0.8, 300, 0.8, MAX_CONTEXT)),
    "llama3.1-8b": ModelSpec(ModelType("llama3.1-8b", 16 * GB), 70000.0,
                             TokenDist(2000, 0.8, 250, 0.8, MAX_CONTEXT)),
    "llama3.2-3b": ModelSpec(ModelType("llama3.2-3b", int(6.4 * GB)), 140000.0,
                             TokenDist(1500, 0.8, 200, 0.8, MAX_CONTEXT)),
}

GPUS: Dict[str, GpuType] = {
    "a100": GpuType("a100", 640 * GB, 32.77, vm_acquire_delay=5 * MINUTE),
    "h100": GpuType("h100", 640 * GB, 98.32, vm_acquire_delay=5 * MINUTE),
}

REGION_IDS = ("east", "central", "west")
# mean one-way latency between region pairs (ms); the tail keeps every sample within 500 ms
_LATENCY = {("east", "central"): 40, ("central", "west"): 45, ("east", "west"): 70}


def default_regions(capacity_limit: int = 10**6) -> Dict[str, Region]:
    out = {}
    for r in REGION_IDS:
        lat = {}
        for (a, b), ms in _LATENCY.items():
            if r in (a, b):
                other = b if r == a else a
                lat[other] = LatencyDist(base_ms=ms, jitter_ms=20, tail_prob=0.02, tail_ms=500)
        out[r] = Region(r, lat, capacity_limit)
    return out


def default_capacity() -> CapacityTable:
    return load_capacity_csv(DATA_DIR / "capacity.csv")


def calibration(model: str, gpu: str, capacity: CapacityTable,
                tokens: Optional[TokenDist] = None) -> AnalyticCalibration:
    spec = MODELS[model]
    t = tokens or spec.tokens
    return AnalyticCalibration(prefill_tps=spec.prefill_tps, capacity_tps=capacity.tps[model, gpu],
                               effective_capacity_tokens=EFFECTIVE_CAPACITY_TOKENS,
                               mean_input_tokens=t.mean_input, mean_output_tokens=t.mean_output)


def default_perf_model(pairs: Optional[Iterable[Tuple[str, str]]] = None,
                       capacity: Optional[CapacityTable] = None) -> PerfModel:
    """Analytic profiles for every requested (model, gpu) pair (all known pairs by default)."""
    capacity = capacity or default_capacity()
    pairs = sorted(pairs) if pairs is not None else sorted(k for k in capacity.tps if k[0] in MODELS)
    table = ProfileTable()
    reference = {}
    for model, gpu in pairs:
        cal = calibration(model, gpu, capacity)
        table.prefill[model, gpu], table.decode[model, gpu] = analytic_profile(model, gpu, cal)
        reference[model, gpu] = reference_point(cal)
    return PerfModel(table, capacity, reference)


def models(ids: Iterable[str]) -> Dict[str, ModelType]:
    return {m: MODELS[m].model for m in ids}


def token_dists(ids: Iterable[str]) -> Dict[str, TokenDist]:
    return {m: MODELS[m].tokens for m in ids}
