"""Batch execution-time model: interpolation over per-(model, GPU) profiles.

Prefill time is piecewise-linear in the batch's prompt-token total. Decode
iteration time is bilinear over (active batch size, tokens in flight). Queries
beyond the sampled range extrapolate along the last segment and bump
``extrapolations`` instead of failing.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .domain import FleetSimError

DATA_DIR = Path(__file__).parent / "data"


class UnknownPair(FleetSimError):
    """No profile or capacity entry for a (model, gpu) pair."""


class ProfileError(FleetSimError):
    pass


def _segment(xs: Sequence[float], x: float) -> int:
    """Index i such that xs[i] <= x < xs[i+1], clamped to the outer segments."""
    i = bisect_right(xs, x) - 1
    return min(max(i, 0), len(xs) - 2)


@dataclass
class PrefillCurve:
    tokens: List[float]
    time_ms: List[float]

    def __post_init__(self):
        _check_axis(self.tokens, "prefill tokens")
        if any(b < a for a, b in zip(self.time_ms, self.time_ms[1:])):
            raise ProfileError("prefill times must be non-decreasing")

    def __call__(self, x: float) -> Tuple[float, bool]:
        xs, ys = self.tokens, self.time_ms
        i = _segment(xs, x)
        x0, x1 = xs[i], xs[i + 1]
        y = ys[i] + (ys[i + 1] - ys[i]) * (x - x0) / (x1 - x0)
        return y, (x > xs[-1] or x < xs[0])


@dataclass
class DecodeGrid:
    batch_sizes: List[float]
    tokens: List[float]
    # time_ms[i][j] at (batch_sizes[i], tokens[j])
    time_ms: List[List[float]]

    def __post_init__(self):
        _check_axis(self.batch_sizes, "decode batch sizes")
        _check_axis(self.tokens, "decode tokens in flight")
        if len(self.time_ms) != len(self.batch_sizes) or any(
                len(row) != len(self.tokens) for row in self.time_ms):
            raise ProfileError("decode table must be a full grid")

    def __call__(self, b: float, t: float) -> Tuple[float, bool]:
        xs, ys, v = self.batch_sizes, self.tokens, self.time_ms
        i, j = _segment(xs, b), _segment(ys, t)
        fx = (b - xs[i]) / (xs[i + 1] - xs[i])
        fy = (t - ys[j]) / (ys[j + 1] - ys[j])
        y = ((1 - fx) * (1 - fy) * v[i][j] + fx * (1 - fy) * v[i + 1][j]
             + (1 - fx) * fy * v[i][j + 1] + fx * fy * v[i + 1][j + 1])
        out = b < xs[0] or b > xs[-1] or t < ys[0] or t > ys[-1]
        return y, out


def _check_axis(values: Sequence[float], name: str) -> None:
    if len(values) < 2:
        raise ProfileError(f"{name}: need at least 2 samples")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ProfileError(f"{name}: samples must be strictly increasing")


@dataclass
class ProfileTable:
    prefill: Dict[Tuple[str, str], PrefillCurve] = field(default_factory=dict)
    decode: Dict[Tuple[str, str], DecodeGrid] = field(default_factory=dict)

    def pairs(self):
        return set(self.prefill) & set(self.decode)


@dataclass
class CapacityTable:
    tps: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for pair, value in self.tps.items():
            if value <= 0:
                raise ProfileError(f"capacity for {pair} must be positive")


class PerfModel:
    """Execution-time oracle for the simulator."""

    def __init__(self, profiles: ProfileTable, capacity: CapacityTable,
                 reference: Optional[Dict[Tuple[str, str], Tuple[float, float]]] = None):
        self.profiles = profiles
        self.capacity = capacity
        # (model, gpu) -> (batch size, tokens in flight) of a typically loaded instance
        self.reference = dict(reference or {})
        self.extrapolations = 0

    def prefill_time(self, model: str, gpu: str, batch_prompt_tokens: float) -> float:
        try:
            curve = self.profiles.prefill[model, gpu]
        except KeyError:
            raise UnknownPair(f"no prefill profile for ({model}, {gpu})") from None
        y, out = curve(batch_prompt_tokens)
        if out:
            self.extrapolations += 1
        return y

    def decode_iteration_time(self, model: str, gpu: str, batch_size: float,
                              tokens_in_flight: float) -> float:
        try:
            grid = self.profiles.decode[model, gpu]
        except KeyError:
            raise UnknownPair(f"no decode profile for ({model}, {gpu})") from None
        y, out = grid(batch_size, tokens_in_flight)
        if out:
            self.extrapolations += 1
        return y

    def instance_tps(self, model: str, gpu: str) -> float:
        try:
            return self.capacity.tps[model, gpu]
        except KeyError:
            raise UnknownPair(f"no capacity entry for ({model}, {gpu})") from None


def _data_rows(path) -> Iterable[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    return csv.DictReader(lines)


def load_capacity_csv(path) -> CapacityTable:
    """Read ``model,gpu,tps`` rows ('#' lines are comments)."""
    tps = {}
    for row in _data_rows(path):
        tps[row["model"], row["gpu"]] = float(row["tps"])
    return CapacityTable(tps)


def load_profile_csv(path) -> ProfileTable:
    """Read ``model,gpu,phase,x1,x2,time_ms`` rows.

    Prefill rows use x1 = batch prompt tokens (x2 ignored). Decode rows use
    x1 = batch size and x2 = tokens in flight and must form a full grid.
    """
    prefill: Dict[Tuple[str, str], Dict[float, float]] = {}
    decode: Dict[Tuple[str, str], Dict[Tuple[float, float], float]] = {}
    for row in _data_rows(path):
        key = (row["model"], row["gpu"])
        phase = row["phase"].strip()
        x1, t = float(row["x1"]), float(row["time_ms"])
        if phase == "prefill":
            prefill.setdefault(key, {})[x1] = t
        elif phase == "decode":
            decode.setdefault(key, {})[x1, float(row["x2"])] = t
        else:
            raise ProfileError(f"unknown phase {phase!r}")
    table = ProfileTable()
    for key, pts in prefill.items():
        xs = sorted(pts)
        table.prefill[key] = PrefillCurve(xs, [pts[x] for x in xs])
    for key, pts in decode.items():
        bs = sorted({b for b, _ in pts})
        ts = sorted({t for _, t in pts})
        try:
            grid = [[pts[b, t] for t in ts] for b in bs]
        except KeyError:
            raise ProfileError(f"decode samples for {key} do not form a grid") from None
        table.decode[key] = DecodeGrid(bs, ts, grid)
    return table


def write_profile_csv(table: ProfileTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "gpu", "phase", "x1", "x2", "time_ms"])
        for (m, g), c in sorted(table.prefill.items()):
            for x, t in zip(c.tokens, c.time_ms):
                w.writerow([m, g, "prefill", x, 0, t])
        for (m, g), d in sorted(table.decode.items()):
            for i, b in enumerate(d.batch_sizes):
                for j, x in enumerate(d.tokens):
                    w.writerow([m, g, "decode", b, x, d.time_ms[i][j]])


@dataclass(frozen=True)
class AnalyticCalibration:
    """Inputs for a default profile of one (model, gpu) pair.

    The decode iteration costs ``base + per_seq * batch``; the split between the
    two terms is ``base_fraction`` at the calibration point.
    """

    prefill_tps: float
    capacity_tps: float
    effective_capacity_tokens: float
    mean_input_tokens: float
    mean_output_tokens: float
    memory_threshold: float = 0.70
    base_fraction: float = 0.6


def calibrated_decode_params(cal: AnalyticCalibration) -> Tuple[float, float]:
    """Return (base_ms, per_seq_ms) so that a steady state at the memory threshold
    sustains exactly ``capacity_tps`` input tokens per second.

    By Little's law the resident batch at the threshold is ``B = threshold * C /
    (I + O/2)``; arrivals at ``capacity/I`` per second then fix how long each
    decode iteration may take.
    """
    # a request holds its prompt plus, on average, half its output while resident
    resident = cal.mean_input_tokens + cal.mean_output_tokens / 2.0
    batch = cal.memory_threshold * cal.effective_capacity_tokens / resident
    prefill_share = cal.capacity_tps / cal.prefill_tps
    if prefill_share >= 1:
        raise ProfileError("capacity exceeds prefill throughput")
    # requests/s = capacity/I; decode tokens/s needed = capacity*O/I, delivered at
    # batch tokens per iteration during the non-prefill share of wall time.
    iter_s = batch * (1 - prefill_share) * cal.mean_input_tokens / (cal.capacity_tps * cal.mean_output_tokens)
    iter_ms = 1000.0 * iter_s
    base = cal.base_fraction * iter_ms
    per_seq = (1 - cal.base_fraction) * iter_ms / batch
    return base, per_seq


def analytic_profile(model: str, gpu: str, cal: AnalyticCalibration,
                     max_tokens: float = 2.0**20, max_batch: float = 4096) -> Tuple[PrefillCurve, DecodeGrid]:
    base, per_seq = calibrated_decode_params(cal)
    prefill = PrefillCurve([1.0, max_tokens], [1000.0 / cal.prefill_tps, 1000.0 * max_tokens / cal.prefill_tps])
    decode = DecodeGrid([1.0, max_batch], [0.0, max_tokens],
                        [[base + per_seq, base + per_seq],
                         [base + per_seq * max_batch, base + per_seq * max_batch]])
    return prefill, decode


def reference_point(cal: AnalyticCalibration) -> Tuple[float, float]:
    """(batch size, tokens in flight) at the calibration point of ``cal``."""
    resident = cal.mean_input_tokens + cal.mean_output_tokens / 2.0
    batch = cal.memory_threshold * cal.effective_capacity_tokens / resident
    return batch, batch * resident
