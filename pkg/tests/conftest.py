"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))
sys.path.insert(0, str(HERE.parent / "src"))

from fleetsim import catalog  # noqa: E402
from fleetsim.domain import SECOND, SlaDefaults, WorkloadTier, make_request  # noqa: E402
from fleetsim.engine import ControlPlane, Job, SimConfig, Simulator  # noqa: E402
from fleetsim.metrics import RequestRecord  # noqa: E402

# lines printed after the run by pytest_terminal_summary
ACCEPTANCE_LINES: List[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


def sim_config(models: Sequence[str] = ("llama2-70b",), deployed: Sequence[str] = ("east",),
               initial: int = 2, minimum: int = 2, **kw) -> SimConfig:
    """A fixed fleet with every catalog region known but only ``deployed`` regions serving."""
    perf = catalog.default_perf_model([(m, "h100") for m in models])
    regions = kw.pop("regions", None) or catalog.default_regions()
    model_types = kw.pop("model_types", None) or catalog.models(models)
    return SimConfig(models=model_types, gpus=dict(catalog.GPUS), regions=regions,
                     deployments={(m, r): "h100" for m in models for r in deployed}, perf=perf,
                     initial_instances=initial, min_instances=minimum, **kw)


def job(rid: int, tier: WorkloadTier = WorkloadTier.IW_F, inp: int = 100, out: int = 10, arrival: int = 0,
        model: str = "llama2-70b", region: str = "east") -> Job:
    req = make_request(rid, arrival, region, tier, model, inp, out)
    rec = RequestRecord(req.id, req.tier, req.model, req.client_region, req.arrival_ts, req.input_tokens,
                        req.output_tokens, req.ttft_deadline, req.completion_deadline)
    return Job(req, rec)


class Scripted(ControlPlane):
    """Runs ``(ts_ms, fn(sim, now))`` actions at the first sample at or after ``ts_ms``."""

    name = "scripted"

    def __init__(self, actions: Sequence[Tuple[int, Callable]]):
        self.actions = sorted(actions, key=lambda a: a[0])

    def on_sample(self, sim, now):
        while self.actions and self.actions[0][0] <= now:
            _ts, fn = self.actions.pop(0)
            fn(sim, now)
