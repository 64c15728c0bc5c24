"""Deferred-execution queue for non-interactive (NIW) requests.

NIW work waits in one FIFO per model and trickles out to endpoints that report
spare memory. Old requests are promoted to priority 0, and anything whose
deadline is about to become unreachable is pushed out regardless of load.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

from .domain import HOUR


@dataclass(frozen=True)
class NiwConfig:
    sig_low: float = 0.60
    sig_lower: float = 0.50
    escalate_after: int = 10 * HOUR
    deadline: int = 24 * HOUR
    # force release once the deadline is closer than margin_factor x estimated service time
    margin_factor: float = 2.0

    def __post_init__(self):
        if not 0 <= self.sig_lower <= self.sig_low <= 1:
            raise ValueError("need 0 <= sig_lower <= sig_low <= 1")


class DeferredQueue:
    """Per-model FIFO of deferred requests.

    Items need ``enqueue_ts``, ``priority`` (mutable) and ``completion_deadline``.
    """

    def __init__(self, cfg: NiwConfig = NiwConfig(),
                 service_estimate: Optional[Callable[[object], int]] = None,
                 max_service_estimate: Optional[Callable[[str], int]] = None):
        self.cfg = cfg
        self.queues: Dict[str, Deque] = {}
        self._escalated: Dict[str, int] = {}  # length of the already-promoted head run
        self.service_estimate = service_estimate or (lambda item: 0)
        self.max_service_estimate = max_service_estimate or (lambda model: 0)
        self.enqueued = 0
        self.released = 0
        self.escalations = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def length(self, model: str) -> int:
        q = self.queues.get(model)
        return len(q) if q else 0

    def enqueue(self, model: str, item, now: int) -> None:
        item.enqueue_ts = now
        self.queues.setdefault(model, deque()).append(item)
        self.enqueued += 1

    def _pop(self, model: str):
        q = self.queues[model]
        item = q.popleft()
        if self._escalated.get(model, 0):
            self._escalated[model] -= 1
        self.released += 1
        return item

    def release_count(self, utilization: float) -> int:
        if utilization < self.cfg.sig_lower:
            return 2
        if utilization < self.cfg.sig_low:
            return 1
        return 0

    def on_capacity_signal(self, model: str, region: str, utilization: float, now: int) -> List:
        """Items to route to ``region``'s endpoint for ``model`` after a load signal."""
        n = self.release_count(utilization)
        q = self.queues.get(model)
        if not n or not q:
            return []
        return [self._pop(model) for _ in range(min(n, len(q)))]

    def escalate(self, now: int) -> int:
        """Promote every request older than the escalation age; return how many changed."""
        count = 0
        age = self.cfg.escalate_after
        for model, q in self.queues.items():
            i = self._escalated.get(model, 0)
            while i < len(q) and now - q[i].enqueue_ts > age:
                if q[i].priority != 0:
                    q[i].priority = 0
                    count += 1
                i += 1
            self._escalated[model] = i
        self.escalations += count
        return count

    def due_for_release(self, now: int) -> List[Tuple[str, object]]:
        """Pop requests whose deadline would be missed by waiting any longer."""
        out = []
        k = self.cfg.margin_factor
        for model, q in self.queues.items():
            horizon = k * self.max_service_estimate(model)
            due = []
            for i, item in enumerate(q):
                slack = item.completion_deadline - now
                # deadlines are non-decreasing along the FIFO, so nothing later can be due
                if slack >= horizon:
                    break
                if slack < k * self.service_estimate(item):
                    due.append(i)
            if not due:
                continue
            prefix = self._escalated.get(model, 0)
            self._escalated[model] = prefix - sum(1 for i in due if i < prefix)
            due_set = set(due)
            kept = deque()
            for i, item in enumerate(q):
                if i in due_set:
                    out.append((model, item))
                else:
                    kept.append(item)
            self.queues[model] = kept
            self.released += len(due)
        return out
