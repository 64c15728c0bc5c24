"""Discrete-event kernel and the model-instance execution model.

Events are ordered by ``(fire_ts, seq)`` where ``seq`` is handed out at
scheduling time, so a run is a pure function of its inputs and seed.

Each instance runs iteration-level continuous batching. At every iteration
boundary it admits queued requests whose peak KV footprint fits, runs one
prefill for the newcomers (their first token appears when it ends), and
otherwise advances the decode batch. In ``coarse`` mode a decode segment spans
several iterations, ending at the next completion or at the boundary after a
new admissible arrival; ``iteration`` mode schedules every iteration
separately. Both modes share one float clock per instance, so they agree to
the millisecond on a singleton batch.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from .domain import (GB, HOUR, MINUTE, SECOND, FleetSimError, GpuType, ModelType, Region, Request,
                     SlaDefaults, WorkloadTier)
from .metrics import InstanceRecord, MetricsLedger, ProvisionRecord, RequestRecord
from .niw import DeferredQueue, NiwConfig
from .perf import PerfModel
from .routing import (ModelNowhereDeployed, RegionRoutingConfig, SchedulerConfig, latency_preference,
                      order_queue, route_global_iw)

# event kinds
ARRIVAL, DELIVER, STEP, PROVISIONED, SWITCHED, SAMPLE, FORECAST = range(7)

# instance roles
PROVISIONING, PRIVATE, DRAINING, SWITCHING, SPOT, RETIRED = (
    "provisioning", "private", "draining", "switching", "spot", "retired")

SWITCH_DELAY = 60 * SECOND
KV_REFERENCE_TOKENS = 3 * 8192  # three 8k-token requests ...
KV_REFERENCE_SHARE = 0.25       # ... fill a quarter of effective memory


class CapacityExceeded(FleetSimError):
    pass


class NotDrained(FleetSimError):
    pass


class NoCapacity(FleetSimError):
    pass


def default_kv_bytes(model: ModelType, gpu: GpuType) -> int:
    if model.kv_bytes_per_token:
        return model.kv_bytes_per_token
    effective = gpu.vm_total_memory_bytes - model.weights_bytes
    return max(1, int(effective * KV_REFERENCE_SHARE / KV_REFERENCE_TOKENS))


def kv_footprint(input_tokens: int, generated: int, kv_bytes_per_token: int) -> int:
    """KV-cache bytes held by a request: (prompt + tokens generated so far) x bytes/token."""
    return (input_tokens + generated) * kv_bytes_per_token


@dataclass
class SimConfig:
    models: Mapping[str, ModelType]
    gpus: Mapping[str, GpuType]
    regions: Mapping[str, Region]
    # (model, region) -> gpu id; one endpoint per pair
    deployments: Mapping[Tuple[str, str], str]
    perf: PerfModel
    initial_instances: int = 20
    min_instances: int = 2
    max_per_deployment: int = 3
    max_deployments: int = 10
    sample_period: int = 1 * SECOND
    decode_mode: str = "coarse"
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    routing: RegionRoutingConfig = field(default_factory=RegionRoutingConfig)
    niw: NiwConfig = field(default_factory=NiwConfig)
    sla: SlaDefaults = field(default_factory=SlaDefaults)
    seed: int = 0
    # siloed pools: initial split of each endpoint, e.g. {"iw": 16, "niw": 4}
    pools: Optional[Mapping[str, int]] = None
    horizon: Optional[int] = None
    audit: bool = False

    @property
    def max_instances(self) -> int:
        return self.max_per_deployment * self.max_deployments

    def __post_init__(self):
        if self.decode_mode not in ("coarse", "iteration"):
            raise ValueError("decode_mode must be 'coarse' or 'iteration'")
        if not 0 < self.min_instances <= self.max_instances:
            raise ValueError("need 0 < min_instances <= max_instances")
        for (model, region), gpu in self.deployments.items():
            if model not in self.models or region not in self.regions or gpu not in self.gpus:
                raise ValueError(f"deployment ({model}, {region}, {gpu}) references unknown ids")
            if self.models[model].weights_bytes >= self.gpus[gpu].vm_total_memory_bytes:
                raise ValueError(f"{model} weights do not fit on {gpu}")


class Job:
    """Runtime state of one request inside the simulator."""

    __slots__ = ("rec", "arrival_ts", "tier", "model", "input_tokens", "output_tokens", "ttft_deadline",
                 "completion_deadline", "priority", "enqueue_ts", "iter0", "service_ms")

    def __init__(self, req: Request, rec: RequestRecord):
        self.rec = rec
        self.arrival_ts = req.arrival_ts
        self.tier = req.tier
        self.model = req.model
        self.input_tokens = req.input_tokens
        self.output_tokens = req.output_tokens
        self.ttft_deadline = req.ttft_deadline
        self.completion_deadline = req.completion_deadline
        self.priority = req.priority
        self.enqueue_ts = None
        self.iter0 = 0
        self.service_ms = 0

    def remaining_ttft(self, now: int) -> int:
        deadline = self.ttft_deadline if self.ttft_deadline is not None else self.completion_deadline
        return deadline - now

    @property
    def reserved(self) -> int:
        return self.input_tokens + self.output_tokens


class Instance:
    """One model instance. Memory quantities are in tokens; multiply by kv_bytes for bytes."""

    __slots__ = ("id", "model", "gpu", "region", "pool", "role", "kv_bytes", "capacity", "queue",
                 "prefilling", "batch", "batch_size", "reserved", "used", "remaining", "iters", "busy",
                 "version", "clock", "seg_kind", "seg_start", "seg_dt", "seg_iters", "seg_end", "rec",
                 "endpoint", "seq")

    def __init__(self, iid: int, model: str, gpu: str, region: str, pool: str, kv_bytes: int,
                 capacity_tokens: int, rec: InstanceRecord):
        self.id = iid
        self.model = model
        self.gpu = gpu
        self.region = region
        self.pool = pool
        self.role = PROVISIONING
        self.kv_bytes = kv_bytes
        self.capacity = capacity_tokens
        self.queue: List[Job] = []
        self.prefilling: List[Job] = []
        self.batch: List[tuple] = []    # heap of (finish_iter, seq, job)
        self.batch_size = 0
        self.reserved = 0   # sum of peak footprints (input + output) of admitted jobs
        self.used = 0       # sum of current footprints (input + generated)
        self.remaining = 0  # JSQ metric: prompt tokens of queued jobs plus ungenerated tokens of running jobs
        self.iters = 0
        self.busy = False
        self.version = 0
        self.clock = 0.0
        self.seg_kind = None
        self.seg_start = 0.0
        self.seg_dt = 0.0
        self.seg_iters = 0
        self.seg_end = 0.0
        self.rec = rec
        self.endpoint = None
        self.seq = 0

    @property
    def effective_capacity_bytes(self) -> int:
        return self.capacity * self.kv_bytes

    @property
    def effective_used_bytes(self) -> int:
        return self.used * self.kv_bytes

    def footprints(self) -> int:
        """Recompute ``used`` from the jobs themselves (audit path)."""
        total = sum(j.input_tokens for j in self.prefilling)
        for _f, _s, j in self.batch:
            total += j.input_tokens + 1 + self.iters - j.iter0
        return total

    def idle(self) -> bool:
        return not self.queue and not self.prefilling and not self.batch_size


class Endpoint:
    """All instances serving one model in one region (and pool, when siloed)."""

    def __init__(self, model: str, region: str, pool: str, gpu: str):
        self.model = model
        self.region = region
        self.pool = pool
        self.gpu = gpu
        self.instances: Dict[int, Instance] = {}   # every instance in a private role
        self.serving: List[Instance] = []          # role == PRIVATE, ordered by id
        self.used = 0
        self.capacity = 0
        self.pending: List[Job] = []
        self.last_action = -10**15
        self.target: Optional[int] = None

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.model, self.region, self.pool

    @property
    def n(self) -> int:
        """Live private count: serving plus still provisioning."""
        return sum(1 for i in self.instances.values() if i.role in (PRIVATE, PROVISIONING))

    @property
    def provisioning(self) -> int:
        return sum(1 for i in self.instances.values() if i.role == PROVISIONING)

    def utilization(self) -> float:
        if self.capacity <= 0:
            return 0.0
        return self.used / self.capacity


class ControlPlane:
    """No-op control plane: fixed fleet, no scaling. Strategies override the hooks."""

    name = "static"
    siloed = False

    def attach(self, sim: "Simulator") -> None:
        pass

    def on_arrival(self, sim: "Simulator", ep: Endpoint, now: int) -> None:
        pass

    def on_sample(self, sim: "Simulator", now: int) -> None:
        pass

    def on_hour(self, sim: "Simulator", now: int) -> None:
        pass


class Simulator:
    def __init__(self, cfg: SimConfig, control: Optional[ControlPlane] = None):
        self.cfg = cfg
        self.control = control or ControlPlane()
        self.ledger = MetricsLedger()
        self.rng = random.Random(cfg.seed)
        self.perf = cfg.perf
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self._next_iid = 0
        self.endpoints: Dict[Tuple[str, str, str], Endpoint] = {}
        self.spot: Dict[str, Dict[str, List[Instance]]] = {r: defaultdict(list) for r in cfg.regions}
        self.region_vms: Dict[str, int] = defaultdict(int)
        self.global_pending: List[Job] = []
        self.open_jobs = 0
        self.last_completion = 0
        self.trace_end = 0
        self.stream_done = False
        self.coarse = cfg.decode_mode == "coarse"
        self.pools = tuple(cfg.pools) if cfg.pools else ("shared",)
        self.iw_pool = "iw" if cfg.pools else "shared"
        self.niw_pool = "niw" if cfg.pools else "shared"
        self.defer_niw = not cfg.pools
        self.niw_queue = DeferredQueue(cfg.niw, service_estimate=lambda j: j.service_ms,
                                       max_service_estimate=self._max_service)
        self._max_service_ms: Dict[str, int] = defaultdict(int)
        self._pref: Dict[Tuple[str, str], List[str]] = {}
        self._kv: Dict[Tuple[str, str], int] = {}
        self._iter_ms: Dict[Tuple[str, str], float] = {}
        # per-minute input-token counters: (model, client region) -> tokens this minute
        self._iw_tokens: Dict[Tuple[str, str], int] = defaultdict(int)
        self._niw_tokens: Dict[Tuple[str, str], int] = defaultdict(int)
        self.iw_tps: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        self.niw_tps: Dict[Tuple[str, str], List[float]] = defaultdict(list)
        self._util_sum: Dict[Tuple[str, str], float] = defaultdict(float)
        self._util_n = 0
        self._minutes_rolled = 0
        self.audit_failures = 0
        self.events_processed = 0

    # -- event plumbing ------------------------------------------------------

    def schedule(self, ts: int, kind: int, payload=None) -> None:
        if ts < self.now:
            raise FleetSimError(f"event scheduled in the past ({ts} < {self.now})")
        self._seq += 1
        heapq.heappush(self._heap, (ts, self._seq, kind, payload))

    # -- fleet construction --------------------------------------------------

    def _kv_and_capacity(self, model: str, gpu: str) -> Tuple[int, int]:
        m, g = self.cfg.models[model], self.cfg.gpus[gpu]
        kv = default_kv_bytes(m, g)
        return kv, (g.vm_total_memory_bytes - m.weights_bytes) // kv

    def _new_instance(self, model: str, region: str, pool: str, gpu: str) -> Instance:
        iid = self._next_iid
        self._next_iid += 1
        kv, cap = self._kv_and_capacity(model, gpu)
        rec = InstanceRecord(iid, model, region, gpu, self.cfg.models[model].gpus_per_instance, pool)
        self.ledger.add_instance(rec)
        inst = Instance(iid, model, gpu, region, pool, kv, cap, rec)
        self.region_vms[region] += 1
        return inst

    def _attach(self, inst: Instance, ep: Endpoint, role: str, now: int) -> None:
        inst.endpoint = ep
        inst.pool = ep.pool
        inst.rec.pool = ep.pool
        ep.instances[inst.id] = inst
        inst.role = role
        inst.rec.enter(role, now)
        self.ledger.count_change(now, inst.model, inst.region, ep.pool, +1)
        if role == PRIVATE:
            self._start_serving(inst, now)

    def _start_serving(self, inst: Instance, now: int) -> None:
        ep = inst.endpoint
        inst.role = PRIVATE
        ep.serving.append(inst)
        ep.serving.sort(key=lambda i: i.id)
        ep.capacity += inst.capacity
        ep.used += inst.used
        inst.clock = float(now)
        if ep.pending:
            waiting, ep.pending = ep.pending, []
            for job in waiting:
                self.deliver(job, ep, now)
        if self.global_pending:
            waiting, self.global_pending = self.global_pending, []
            for job in waiting:
                self.route_iw(job, now)

    def _stop_serving(self, inst: Instance) -> None:
        ep = inst.endpoint
        ep.serving.remove(inst)
        ep.capacity -= inst.capacity
        ep.used -= inst.used

    def _build_fleet(self) -> None:
        cfg = self.cfg
        for (model, region), gpu in sorted(cfg.deployments.items()):
            for pool in self.pools:
                ep = Endpoint(model, region, pool, gpu)
                self.endpoints[ep.key] = ep
                count = cfg.pools[pool] if cfg.pools else cfg.initial_instances
                if count < cfg.min_instances:
                    raise CapacityExceeded(f"initial count {count} below the floor for {ep.key}")
                for _ in range(count):
                    self._attach(self._new_instance(model, region, pool, gpu), ep, PRIVATE, 0)
        for region, r in cfg.regions.items():
            floor = sum(cfg.min_instances for ep in self.endpoints.values() if ep.region == region)
            if floor > r.capacity_limit:
                raise CapacityExceeded(f"region {region}: floors need {floor} VMs, limit {r.capacity_limit}")

    # -- helpers for the control plane ------------------------------------------

    def endpoint(self, model: str, region: str, pool: Optional[str] = None) -> Endpoint:
        return self.endpoints[model, region, pool or self.iw_pool]

    def endpoints_for(self, model: str, pool: str) -> List[Endpoint]:
        return [ep for ep in self.endpoints.values() if ep.model == model and ep.pool == pool]

    def calibration_iter_ms(self, model: str, gpu: str) -> float:
        key = (model, gpu)
        if key not in self._iter_ms:
            ref = self.perf.reference.get(key)
            if ref is None:
                _kv, cap = self._kv_and_capacity(model, gpu)
                ref = (16.0, 0.7 * cap)
            self._iter_ms[key] = self.perf.decode_iteration_time(model, gpu, ref[0], ref[1])
        return self._iter_ms[key]

    def service_estimate(self, job: Job, gpu: str) -> int:
        """Prefill plus decode time for ``job`` on a typically loaded instance (ms)."""
        t = self.perf.prefill_time(job.model, gpu, job.input_tokens)
        t += (job.output_tokens - 1) * self.calibration_iter_ms(job.model, gpu)
        return int(math.ceil(t))

    def _max_service(self, model: str) -> int:
        return self._max_service_ms[model]

    def preference(self, model: str, client: str) -> List[str]:
        key = (model, client)
        pref = self._pref.get(key)
        if pref is None:
            regions = sorted({ep.region for ep in self.endpoints.values() if ep.model == model})
            explicit = self.cfg.routing.preference_order.get(client)
            if explicit:
                pref = [r for r in explicit if r in regions] + [r for r in regions if r not in explicit]
            else:
                pref = latency_preference(
                    client, regions, lambda a, b: self.cfg.regions[a].latency_to(b).mean_ms
                    if a in self.cfg.regions else 0.0)
            self._pref[key] = pref
        return pref

    def latency(self, src: str, dst: str) -> int:
        if src == dst or src not in self.cfg.regions:
            return 0
        return self.cfg.regions[src].latency_to(dst).sample(self.rng)

    # -- request path ----------------------------------------------------------

    def on_request(self, req: Request, now: int) -> None:
        self._maybe_roll(now)
        rec = RequestRecord(req.id, req.tier, req.model, req.client_region, req.arrival_ts, req.input_tokens,
                            req.output_tokens, req.ttft_deadline, req.completion_deadline)
        self.ledger.add_request(rec)
        self.open_jobs += 1
        job = Job(req, rec)
        key = (req.model, req.client_region)
        if req.tier is WorkloadTier.NIW:
            self._niw_tokens[key] += req.input_tokens
            if self.defer_niw:
                gpu = self._any_gpu(req.model)
                job.service_ms = self.service_estimate(job, gpu)
                if job.service_ms > self._max_service_ms[req.model]:
                    self._max_service_ms[req.model] = job.service_ms
                self.niw_queue.enqueue(req.model, job, now)
            else:
                self._route_siloed_niw(job, now)
            return
        self._iw_tokens[key] += req.input_tokens
        ep = self.route_iw(job, now)
        if ep is not None and not self.stream_done:
            self.control.on_arrival(self, ep, now)

    def _any_gpu(self, model: str) -> str:
        for ep in self.endpoints.values():
            if ep.model == model:
                return ep.gpu
        raise ModelNowhereDeployed(model)

    def route_iw(self, job: Job, now: int) -> Optional[Endpoint]:
        model, client = job.model, job.rec.client_region
        util = {}
        for region in self.preference(model, client):
            ep = self.endpoints.get((model, region, self.iw_pool))
            if ep is not None and ep.serving:
                util[region] = ep.utilization()
        try:
            region = route_global_iw(self.preference(model, client), util, self.cfg.routing.utilization_threshold)
        except ModelNowhereDeployed:
            self.ledger.bump("held_nowhere_deployed")
            self.global_pending.append(job)
            return None
        ep = self.endpoints[model, region, self.iw_pool]
        self._dispatch(job, ep, client, now)
        return ep

    def _route_siloed_niw(self, job: Job, now: int) -> None:
        client = job.rec.client_region
        ep = self.endpoints.get((job.model, client, self.niw_pool))
        if ep is None:
            cands = sorted(self.endpoints_for(job.model, self.niw_pool), key=lambda e: (e.utilization(), e.region))
            ep = cands[0]
        self._dispatch(job, ep, client, now)

    def _dispatch(self, job: Job, ep: Endpoint, origin: str, now: int) -> None:
        job.rec.routed_ts = now
        job.rec.served_region = ep.region
        delay = self.latency(origin, ep.region)
        if delay:
            self.schedule(now + delay, DELIVER, (job, ep))
        else:
            self.deliver(job, ep, now)

    def deliver(self, job: Job, ep: Endpoint, now: int) -> None:
        if not ep.serving:
            ep.pending.append(job)
            return
        best = ep.serving[0]
        for inst in ep.serving:
            if inst.remaining < best.remaining:
                best = inst
        job.rec.instance_id = best.id
        best.queue.append(job)
        best.remaining += job.input_tokens
        self._kick(best, job, now)

    def release_niw(self, job: Job, ep: Endpoint, now: int) -> None:
        if job.priority == 0:
            job.rec.escalated = True
        self._dispatch(job, ep, job.rec.client_region, now)

    # -- execution -------------------------------------------------------------

    def _kick(self, inst: Instance, job: Job, now: int) -> None:
        if not inst.busy:
            inst.clock = max(inst.clock, float(now))
            self._plan(inst, now)
        elif (self.coarse and inst.seg_kind == "decode" and inst.seg_iters > 1
              and inst.reserved + job.reserved <= inst.capacity):
            # cut the running segment at the next iteration boundary so the newcomer can join
            b = max(1, math.ceil((now - inst.seg_start) / inst.seg_dt))
            if b < inst.seg_iters:
                inst.seg_iters = b
                inst.seg_end = inst.seg_start + b * inst.seg_dt
                inst.version += 1
                self.schedule(max(now, math.ceil(inst.seg_end)), STEP, (inst, inst.version))

    def admit_to_batch(self, inst: Instance, now: int) -> List[Job]:
        """Move every queued job whose peak footprint fits into the prefill set, in policy order.

        Once a priority-0 job fails to fit, priority-1 jobs are not admitted at
        this boundary.
        """
        if not inst.queue:
            return []
        ordered = order_queue(inst.queue, now, self.cfg.scheduler) if len(inst.queue) > 1 else inst.queue
        free = inst.capacity - inst.reserved
        admitted, kept = [], []
        blocked = False
        for job in ordered:
            need = job.input_tokens + job.output_tokens
            if need <= free and not (blocked and job.priority == 1):
                admitted.append(job)
                free -= need
            else:
                if job.priority == 0:
                    blocked = True
                kept.append(job)
        if admitted:
            inst.queue = kept
            for job in admitted:
                job.rec.dequeued_ts = now
                inst.reserved += job.input_tokens + job.output_tokens
                # the prompt leaves the queue and the whole output is now outstanding
                inst.remaining += job.output_tokens - job.input_tokens
                self._add_used(inst, job.input_tokens)
            inst.prefilling = admitted
        return admitted

    def _add_used(self, inst: Instance, delta: int) -> None:
        inst.used += delta
        if inst.role == PRIVATE:
            inst.endpoint.used += delta

    def _plan(self, inst: Instance, now: int) -> None:
        """Start the next segment at the instance's clock (never before ``now``)."""
        if inst.role in (PRIVATE, DRAINING) and self.admit_to_batch(inst, now):
            tokens = sum(j.input_tokens for j in inst.prefilling)
            dur = self.perf.prefill_time(inst.model, inst.gpu, tokens)
            inst.seg_kind = "prefill"
            inst.seg_start = inst.clock
            inst.seg_end = inst.clock + dur
        elif inst.batch_size:
            b = inst.batch_size
            k = 1 if not self.coarse else inst.batch[0][0] - inst.iters
            mid = inst.used + b * (k - 1) / 2.0
            dt = self.perf.decode_iteration_time(inst.model, inst.gpu, b, mid)
            inst.seg_kind = "decode"
            inst.seg_start = inst.clock
            inst.seg_dt = dt
            inst.seg_iters = k
            inst.seg_end = inst.clock + k * dt
        else:
            inst.busy = False
            inst.seg_kind = None
            if inst.role == DRAINING:
                self._finish_drain(inst, now)
            return
        inst.busy = True
        inst.version += 1
        self.schedule(max(now, math.ceil(inst.seg_end)), STEP, (inst, inst.version))

    def _step(self, inst: Instance, version: int, now: int) -> None:
        if version != inst.version:
            return
        if inst.seg_kind == "prefill":
            for job in inst.prefilling:
                job.rec.first_token_ts = now
                inst.remaining -= 1
                self._add_used(inst, 1)
                if job.output_tokens == 1:
                    self._complete(inst, job, 1, now)
                else:
                    # generated = 1 + iters - iter0 ; done when generated == output_tokens
                    job.iter0 = inst.iters
                    inst.seq += 1
                    heapq.heappush(inst.batch, (inst.iters + job.output_tokens - 1, inst.seq, job))
                    inst.batch_size += 1
            inst.prefilling = []
        else:
            k = inst.seg_iters
            b = inst.batch_size
            inst.iters += k
            inst.remaining -= k * b
            self._add_used(inst, k * b)
            while inst.batch and inst.batch[0][0] <= inst.iters:
                _f, _s, job = heapq.heappop(inst.batch)
                inst.batch_size -= 1
                self._complete(inst, job, 1 + inst.iters - job.iter0, now)
        inst.clock = inst.seg_end
        self._plan(inst, now)

    def _complete(self, inst: Instance, job: Job, generated: int, now: int) -> None:
        job.rec.completed_ts = now
        inst.reserved -= job.input_tokens + job.output_tokens
        self._add_used(inst, -(job.input_tokens + generated))
        self.open_jobs -= 1
        self.last_completion = now

    # -- provisioning and the spot pool ------------------------------------------

    def region_vm_count(self, region: str) -> int:
        return self.region_vms[region]

    def spot_pool(self, region: str, pool: Optional[str] = None) -> Dict[str, List[Instance]]:
        """Spot instances of ``region`` by model.

        With siloed pools only instances last attached to ``pool`` are offered,
        so one pool never picks up capacity the other gave back.
        """
        if not self.cfg.pools or pool is None:
            return self.spot[region]
        return {m: [i for i in lst if i.pool == pool] for m, lst in self.spot[region].items()}

    def _take_spot(self, region: str, model: str, pool: str) -> Instance:
        lst = self.spot[region][model]
        for i, inst in enumerate(lst):
            if not self.cfg.pools or inst.pool == pool:
                return lst.pop(i)
        raise NoCapacity(f"no {model} spot instance in {region}")

    def provision(self, ep: Endpoint, source: str, now: int, donor_model: Optional[str] = None) -> Instance:
        """Start bringing one instance into ``ep``; it serves once ProvisioningDone fires.

        ``source`` is ``spot-same``, ``spot-other`` (taken from ``donor_model``'s
        spot instances) or ``fresh``.
        """
        model = self.cfg.models[ep.model]
        deploy = model.local_deploy_delay if model.weights_local(ep.region) else model.remote_deploy_delay
        if source == "spot-same":
            inst = self._take_spot(ep.region, ep.model, ep.pool)
            delay = self.reclaim_delay()
        elif source == "spot-other":
            old = self._take_spot(ep.region, donor_model, ep.pool)
            old.role = RETIRED
            old.rec.enter(RETIRED, now)
            self.region_vms[ep.region] -= 1
            inst = self._new_instance(ep.model, ep.region, ep.pool, ep.gpu)
            delay = self.reclaim_delay() + deploy
        elif source == "fresh":
            if self.region_vms[ep.region] >= self.cfg.regions[ep.region].capacity_limit:
                raise NoCapacity(f"region {ep.region} at its VM limit")
            inst = self._new_instance(ep.model, ep.region, ep.pool, ep.gpu)
            delay = self.cfg.gpus[ep.gpu].vm_acquire_delay + deploy
        else:
            raise ValueError(f"unknown provisioning source {source!r}")
        self._attach(inst, ep, PROVISIONING, now)
        self.schedule(now + delay, PROVISIONED, (inst, source, now))
        return inst

    def reclaim_delay(self) -> int:
        """Spot reclaim time in [0.5, 5] minutes with mode and median both at 1 minute.

        Half the mass is a rising triangle on [0.5, 1] and half a falling one on
        [1, 5]; a single triangle over [0.5, 5] would put the median near 2 minutes.
        """
        if self.rng.random() < 0.5:
            minutes = self.rng.triangular(0.5, 1.0, 1.0)
        else:
            minutes = self.rng.triangular(1.0, 5.0, 1.0)
        return int(round(minutes * MINUTE))

    def _provisioned(self, inst: Instance, source: str, start: int, now: int) -> None:
        self.ledger.provisions.append(ProvisionRecord(inst.id, inst.model, inst.region,
                                                      self.cfg.models[inst.model].gpus_per_instance,
                                                      source, start, now))
        inst.rec.enter(PRIVATE, now)
        self._start_serving(inst, now)

    def pick_victim(self, ep: Endpoint) -> Optional[Instance]:
        if not ep.serving:
            return None
        best = ep.serving[0]
        for inst in ep.serving:
            if inst.remaining < best.remaining:
                best = inst
        return best

    def begin_drain(self, inst: Instance, now: int) -> None:
        """Stop routing to ``inst``, hand its queue back to the endpoint, donate once idle."""
        if inst.role != PRIVATE:
            raise FleetSimError(f"instance {inst.id} is not serving")
        self._stop_serving(inst)
        inst.role = DRAINING
        inst.rec.enter(DRAINING, now)
        waiting, inst.queue = inst.queue, []
        for job in waiting:
            inst.remaining -= job.input_tokens
        for job in waiting:
            self.deliver(job, inst.endpoint, now)
        if not inst.busy:
            self._finish_drain(inst, now)

    def _finish_drain(self, inst: Instance, now: int) -> None:
        self.donate_to_spot(inst, now)

    def donate_to_spot(self, inst: Instance, now: int) -> None:
        """Switch a drained instance to the spot role; it lands there after the switch delay."""
        if not inst.idle() or inst.busy:
            raise NotDrained(f"instance {inst.id} still has work")
        if inst.role not in (PRIVATE, DRAINING):
            raise FleetSimError(f"instance {inst.id} cannot be donated from role {inst.role}")
        if inst.role == PRIVATE:
            self._stop_serving(inst)
        inst.role = SWITCHING
        inst.rec.enter(SWITCHING, now)
        self.schedule(now + SWITCH_DELAY, SWITCHED, inst)

    def _switched(self, inst: Instance, now: int) -> None:
        ep = inst.endpoint
        del ep.instances[inst.id]
        inst.role = SPOT
        inst.rec.enter(SPOT, now)
        self.ledger.count_change(now, inst.model, inst.region, ep.pool, -1)
        self.spot[inst.region][inst.model].append(inst)

    def reclaim_from_spot(self, inst: Instance, ep: Endpoint, now: int) -> None:
        """Take a specific spot instance back into ``ep`` (same model)."""
        if inst.role != SPOT:
            raise FleetSimError(f"instance {inst.id} is not in the spot pool")
        pool = self.spot[inst.region][inst.model]
        pool.remove(inst)
        pool.insert(0, inst)
        self.provision(ep, "spot-same", now)

    # -- NIW queue manager wiring --------------------------------------------------

    def _niw_tick(self, now: int) -> None:
        q = self.niw_queue
        q.escalate(now)
        for model, job in q.due_for_release(now):
            eps = [e for e in self.endpoints_for(model, self.niw_pool) if e.serving]
            if not eps:
                eps = self.endpoints_for(model, self.niw_pool)
            ep = min(eps, key=lambda e: (e.utilization(), e.region))
            job.rec.force_released = True
            self.ledger.bump("niw_force_released")
            self.release_niw(job, ep, now)
        if not len(q):
            return
        for key in sorted(self.endpoints):
            ep = self.endpoints[key]
            if not ep.serving or not q.length(ep.model):
                continue
            for job in q.on_capacity_signal(ep.model, ep.region, ep.utilization(), now):
                self.release_niw(job, ep, now)

    # -- sampling --------------------------------------------------------------------

    def _sample(self, now: int) -> None:
        self._maybe_roll(now)
        for key, ep in self.endpoints.items():
            self._util_sum[key[0], key[1]] += ep.utilization()
        self._util_n += 1
        if self.defer_niw:
            self._niw_tick(now)
        if not self.stream_done or now <= self.trace_end:
            self.control.on_sample(self, now)
        if self.cfg.audit:
            self.audit()

    def _maybe_roll(self, now: int) -> None:
        """Close every whole minute before ``now``; events at a minute boundary count toward the new minute."""
        while self._minutes_rolled < now // MINUTE:
            self._roll_minute()
            self._minutes_rolled += 1

    def _roll_minute(self) -> None:
        per_pool = len(self.pools)
        for key in sorted({(ep.model, ep.region) for ep in self.endpoints.values()}):
            self.ledger.util_minutes[key].append(self._util_sum[key] / (self._util_n * per_pool)
                                                 if self._util_n else 0.0)
            self.iw_tps[key].append(self._iw_tokens[key] / 60.0)
            self.niw_tps[key].append(self._niw_tokens[key] / 60.0)
        self._util_sum.clear()
        self._iw_tokens.clear()
        self._niw_tokens.clear()
        self._util_n = 0

    def audit(self) -> None:
        """Check memory conservation and endpoint bookkeeping; raise on the first violation."""
        for ep in self.endpoints.values():
            used = cap = 0
            for inst in ep.serving:
                if inst.footprints() != inst.used:
                    raise FleetSimError(f"instance {inst.id}: used {inst.used} != footprints {inst.footprints()}")
                if not 0 <= inst.used <= inst.reserved <= inst.capacity:
                    raise FleetSimError(f"instance {inst.id}: memory out of range")
                used += inst.used
                cap += inst.capacity
            if used != ep.used or cap != ep.capacity:
                raise FleetSimError(f"endpoint {ep.key}: aggregate drift")

    # -- main loop -------------------------------------------------------------------

    def run(self, requests: Iterable[Request]) -> MetricsLedger:
        cfg = self.cfg
        self._build_fleet()
        self.control.attach(self)
        stream: Iterator[Request] = iter(requests)
        horizon = cfg.horizon or 0
        self.trace_end = horizon
        nxt = next(stream, None)
        if nxt is not None:
            self.schedule(nxt.arrival_ts, ARRIVAL, nxt)
        else:
            self.stream_done = True
        if horizon or nxt is not None:
            self.schedule(cfg.sample_period, SAMPLE)
            self.schedule(HOUR, FORECAST)
        last_arrival = -1
        heap = self._heap
        while heap:
            ts, _seq, kind, payload = heapq.heappop(heap)
            if self.stream_done and self.open_jobs == 0 and ts > self.trace_end and not len(self.niw_queue):
                break
            self.now = ts
            self.events_processed += 1
            if kind == STEP:
                self._step(payload[0], payload[1], ts)
            elif kind == ARRIVAL:
                if payload.arrival_ts < last_arrival:
                    raise FleetSimError("request stream is not sorted by arrival time")
                last_arrival = payload.arrival_ts
                self.on_request(payload, ts)
                nxt = next(stream, None)
                if nxt is None:
                    self.stream_done = True
                    self.trace_end = max(horizon, last_arrival)
                elif nxt.arrival_ts < last_arrival:
                    raise FleetSimError("request stream is not sorted by arrival time")
                else:
                    self.schedule(nxt.arrival_ts, ARRIVAL, nxt)
            elif kind == DELIVER:
                self.deliver(payload[0], payload[1], ts)
            elif kind == SAMPLE:
                self._sample(ts)
                if not (self.stream_done and self.open_jobs == 0 and ts >= self.trace_end):
                    self.schedule(ts + cfg.sample_period, SAMPLE)
            elif kind == FORECAST:
                if not self.stream_done or ts <= self.trace_end:
                    self._maybe_roll(ts)
                    self.control.on_hour(self, ts)
                    self.schedule(ts + HOUR, FORECAST)
            elif kind == PROVISIONED:
                self._provisioned(payload[0], payload[1], payload[2], ts)
            elif kind == SWITCHED:
                self._switched(payload, ts)
            if cfg.audit:
                self.audit()
        end = max(self.trace_end, self.last_completion)
        for inst_rec in self.ledger.instances.values():
            if inst_rec.role == PROVISIONING:
                self.ledger.provisions.append(ProvisionRecord(
                    inst_rec.id, inst_rec.model, inst_rec.region, inst_rec.gpus, "unfinished",
                    inst_rec.intervals[-1][1], end))
        self.ledger.counters["perf_extrapolation"] = self.perf.extrapolations
        self.ledger.counters["niw_escalations"] = self.niw_queue.escalations
        self.ledger.close(end)
        return self.ledger


def run(cfg: SimConfig, requests: Iterable[Request], control: Optional[ControlPlane] = None) -> MetricsLedger:
    return Simulator(cfg, control).run(requests)
