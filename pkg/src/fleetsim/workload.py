"""Request traces: file ingestion/export and a synthetic diurnal generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .domain import (DAY, HOUR, MINUTE, FleetSimError, InvalidRequest, Request, SlaDefaults, WorkloadTier,
                     make_request)
from .forecast import SeriesTooShort

TRACE_HEADER = ["arrival_ts_ms", "model", "region", "tier", "input_tokens", "output_tokens"]


class ParseError(FleetSimError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidSpec(FleetSimError):
    pass


class ZeroVariance(FleetSimError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ts: int
    model: str
    client_region: str
    tier: str
    input_tokens: int
    output_tokens: int

    def to_request(self, rid: int, sla: SlaDefaults = SlaDefaults()) -> Request:
        return make_request(rid, self.arrival_ts, self.client_region, WorkloadTier.parse(self.tier), self.model,
                            self.input_tokens, self.output_tokens, sla)


@dataclass
class Trace:
    """Ingested requests plus what had to be repaired or skipped on the way in."""

    requests: List[Request]
    unsorted: int = 0
    skipped: int = 0

    def __iter__(self) -> Iterator[Request]:
        return iter(self.requests)

    def __len__(self) -> int:
        return len(self.requests)


def _parse_line(lineno: int, row: List[str]) -> TraceRecord:
    if len(row) != len(TRACE_HEADER):
        raise ParseError(lineno, f"expected {len(TRACE_HEADER)} fields, got {len(row)}")
    ts, model, region, tier, inp, out = (x.strip() for x in row)
    try:
        ts_i, inp_i, out_i = int(ts), int(inp), int(out)
    except ValueError:
        raise ParseError(lineno, "timestamp and token counts must be integers") from None
    if ts_i < 0:
        raise ParseError(lineno, "negative timestamp")
    if inp_i < 1 or out_i < 1:
        raise ParseError(lineno, "token counts must be >= 1")
    try:
        WorkloadTier.parse(tier)
    except InvalidRequest as exc:
        raise ParseError(lineno, str(exc)) from None
    if not model or not region:
        raise ParseError(lineno, "empty model or region")
    return TraceRecord(ts_i, model, region, tier, inp_i, out_i)


def ingest_trace(path, sla: SlaDefaults = SlaDefaults(), strict: bool = True) -> Trace:
    """Read a trace file into requests sorted by arrival time.

    Out-of-order records are repaired with a stable sort and counted in
    ``Trace.unsorted``. Malformed lines raise :class:`ParseError` in strict
    mode and are skipped (and counted) otherwise. Request ids follow file order.
    """
    records: List[TraceRecord] = []
    skipped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise ParseError(1, "missing or wrong header; expected " + ",".join(TRACE_HEADER))
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                records.append(_parse_line(lineno, row))
            except ParseError:
                if strict:
                    raise
                skipped += 1
    unsorted = 0
    latest = -1
    for r in records:
        if r.arrival_ts < latest:
            unsorted += 1
        latest = max(latest, r.arrival_ts)
    order = sorted(range(len(records)), key=lambda i: records[i].arrival_ts)
    requests = [records[i].to_request(i, sla) for i in order]
    return Trace(requests, unsorted, skipped)


def export_trace(requests: Sequence[Request], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([r.arrival_ts, r.model, r.client_region, r.tier.value, r.input_tokens, r.output_tokens])


@dataclass(frozen=True)
class StreamSpec:
    """Arrival process of one (model, region, tier) stream."""

    base_rps: float
    diurnal_amplitude: float = 0.0
    weekend_damping: float = 1.0
    burst_probability: float = 0.0
    burst_multiplier: float = 1.0

    def validate(self, name: str) -> None:
        if self.base_rps < 0:
            raise InvalidSpec(f"{name}: base_rps must be >= 0")
        if not 0 <= self.diurnal_amplitude <= 1:
            raise InvalidSpec(f"{name}: diurnal_amplitude must be in [0, 1]")
        if not 0 <= self.weekend_damping <= 1:
            raise InvalidSpec(f"{name}: weekend_damping must be in [0, 1]")
        if not 0 <= self.burst_probability <= 1:
            raise InvalidSpec(f"{name}: burst_probability must be in [0, 1]")
        if self.burst_multiplier < 1:
            raise InvalidSpec(f"{name}: burst_multiplier must be >= 1")


@dataclass(frozen=True)
class TokenDist:
    """Log-normal prompt and output lengths, clipped to [1, max_tokens]."""

    input_median: float = 2500.0
    input_sigma: float = 0.8
    output_median: float = 300.0
    output_sigma: float = 0.8
    max_tokens: int = 128000

    @property
    def mean_input(self) -> float:
        return self.input_median * math.exp(self.input_sigma ** 2 / 2)

    @property
    def mean_output(self) -> float:
        return self.output_median * math.exp(self.output_sigma ** 2 / 2)


@dataclass(frozen=True)
class InjectedBurst:
    """Deterministic load multiplier on one model's streams in one region."""

    model: str
    region: str
    start: int       # ms
    duration: int    # ms
    multiplier: float = 8.0


@dataclass
class SyntheticWorkloadSpec:
    duration_days: float
    streams: Dict[Tuple[str, str, WorkloadTier], StreamSpec]
    tokens: Dict[str, TokenDist] = field(default_factory=dict)
    seed: int = 0
    # weekday of day 0 (Monday = 0); Saturday and Sunday are damped
    start_weekday: int = 1
    burst_window: int = 10 * MINUTE
    peak_hour: float = 14.0
    injected: List[InjectedBurst] = field(default_factory=list)

    def validate(self) -> None:
        if self.duration_days <= 0:
            raise InvalidSpec("duration_days must be positive")
        if not 0 <= self.start_weekday <= 6:
            raise InvalidSpec("start_weekday must be in 0..6")
        if self.burst_window < MINUTE:
            raise InvalidSpec("burst_window must be at least one minute")
        for key, s in self.streams.items():
            s.validate("/".join(k.value if isinstance(k, WorkloadTier) else k for k in key))
        for model, t in self.tokens.items():
            if min(t.input_median, t.output_median) < 1 or min(t.input_sigma, t.output_sigma) < 0:
                raise InvalidSpec(f"{model}: invalid token distribution")
            if t.max_tokens < 2:
                raise InvalidSpec(f"{model}: max_tokens must be >= 2")

    @property
    def minutes(self) -> int:
        return int(round(self.duration_days * DAY / MINUTE))


def rate_per_minute(spec: SyntheticWorkloadSpec, key, stream: StreamSpec, rng: np.random.Generator) -> np.ndarray:
    """Expected arrivals per second for each minute of the horizon."""
    m = np.arange(spec.minutes)
    hours = m / 60.0
    lam = stream.base_rps * (1.0 + stream.diurnal_amplitude * np.cos(2 * np.pi * (hours % 24 - spec.peak_hour) / 24))
    weekday = (spec.start_weekday + (m // (24 * 60))) % 7
    lam = np.where(weekday >= 5, lam * stream.weekend_damping, lam)
    if stream.burst_probability > 0:
        starts = rng.random(spec.minutes) < stream.burst_probability
        w = spec.burst_window // MINUTE
        active = np.convolve(starts.astype(int), np.ones(w, dtype=int))[:spec.minutes] > 0
        lam = np.where(active, lam * stream.burst_multiplier, lam)
    model, region, _tier = key
    for b in spec.injected:
        if b.model == model and b.region == region:
            lo, hi = b.start // MINUTE, math.ceil((b.start + b.duration) / MINUTE)
            lam[lo:hi] *= b.multiplier
    return lam


def generate_synthetic(spec: SyntheticWorkloadSpec, sla: SlaDefaults = SlaDefaults()) -> List[Request]:
    """Inhomogeneous Poisson arrivals (piecewise constant per minute), deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    chunks = []
    for order, key in enumerate(sorted(spec.streams, key=lambda k: (k[0], k[1], k[2].value))):
        stream = spec.streams[key]
        lam = rate_per_minute(spec, key, stream, rng)
        counts = rng.poisson(lam * 60.0)
        total = int(counts.sum())
        minute = np.repeat(np.arange(spec.minutes, dtype=np.int64), counts)
        ts = minute * MINUTE + rng.integers(0, MINUTE, size=total)
        dist = spec.tokens.get(key[0], TokenDist())
        inp = np.clip(np.rint(rng.lognormal(math.log(dist.input_median), dist.input_sigma, total)), 1,
                      dist.max_tokens - 1).astype(np.int64)
        out = np.clip(np.rint(rng.lognormal(math.log(dist.output_median), dist.output_sigma, total)), 1,
                      dist.max_tokens).astype(np.int64)
        out = np.minimum(out, dist.max_tokens - inp)
        chunks.append((ts, np.full(total, order), inp, out, key))
    if not chunks:
        return []
    ts = np.concatenate([c[0] for c in chunks])
    which = np.concatenate([c[1] for c in chunks])
    inp = np.concatenate([c[2] for c in chunks])
    out = np.concatenate([c[3] for c in chunks])
    keys = [c[4] for c in chunks]
    idx = np.lexsort((which, ts))
    requests = []
    for rid, i in enumerate(idx.tolist()):
        model, region, tier = keys[which[i]]
        requests.append(make_request(rid, int(ts[i]), region, tier, model, int(inp[i]), int(out[i]), sla))
    return requests


def minute_counts(requests: Sequence[Request], minutes: Optional[int] = None) -> np.ndarray:
    ts = np.array([r.arrival_ts for r in requests], dtype=np.int64)
    n = minutes if minutes is not None else (int(ts.max()) // MINUTE + 1 if len(ts) else 0)
    return np.bincount(ts // MINUTE, minlength=n)[:n].astype(float)


def periodicity_score(series: Sequence[float], lag: int) -> float:
    """Pearson correlation between the series and itself shifted by ``lag`` samples."""
    x = np.asarray(series, dtype=float)
    if lag < 1 or len(x) <= lag + 1:
        raise SeriesTooShort(f"series of length {len(x)} too short for lag {lag}")
    a, b = x[:-lag], x[lag:]
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        raise ZeroVariance("series has zero variance")
    return float(a @ b) / den


def spec_from_kv(kv, default_tokens: Optional[Mapping[str, TokenDist]] = None) -> SyntheticWorkloadSpec:
    """Build a spec from a parsed key=value file (see README for the key layout)."""
    streams: Dict[Tuple[str, str, WorkloadTier], Dict[str, float]] = {}
    for rest, value in kv.prefixed("stream."):
        parts = rest.split(".")
        if len(parts) < 4:
            raise InvalidSpec(f"bad stream key stream.{rest}")
        model, region, tier, fld = ".".join(parts[:-3]), parts[-3], parts[-2], parts[-1]
        try:
            streams.setdefault((model, region, WorkloadTier.parse(tier)), {})[fld] = float(value)
        except ValueError:
            raise InvalidSpec(f"stream.{rest}: not a number") from None
    fields = {"base_rps", "diurnal_amplitude", "weekend_damping", "burst_probability", "burst_multiplier"}
    built = {}
    for key, vals in streams.items():
        unknown = set(vals) - fields
        if unknown:
            raise InvalidSpec(f"unknown stream fields {sorted(unknown)}")
        if "base_rps" not in vals:
            raise InvalidSpec(f"stream {key} lacks base_rps")
        built[key] = StreamSpec(**vals)
    tokens = dict(default_tokens or {})
    tok_fields: Dict[str, Dict[str, float]] = {}
    for rest, value in kv.prefixed("tokens."):
        model, _, fld = rest.rpartition(".")
        tok_fields.setdefault(model, {})[fld] = float(value)
    for model, vals in tok_fields.items():
        base = tokens.get(model, TokenDist())
        if "max_tokens" in vals:
            vals["max_tokens"] = int(vals["max_tokens"])
        tokens[model] = TokenDist(**{**base.__dict__, **vals})
    injected = []
    for _rest, value in kv.prefixed("inject_burst"):
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != 5:
            raise InvalidSpec("inject_burst = model,region,start_min,duration_min,multiplier")
        injected.append(InjectedBurst(parts[0], parts[1], int(float(parts[2]) * MINUTE),
                                      int(float(parts[3]) * MINUTE), float(parts[4])))
    spec = SyntheticWorkloadSpec(
        duration_days=kv.get_float("days", 1.0), streams=built, tokens=tokens, seed=kv.get_int("seed", 0),
        start_weekday=kv.get_int("start_weekday", 1), burst_window=int(kv.get_float("burst_window_min", 10) * MINUTE),
        injected=injected)
    spec.validate()
    return spec
