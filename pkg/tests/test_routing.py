import random

import pytest

from fleetsim.domain import SECOND, Request, WorkloadTier
from fleetsim.routing import (ModelNowhereDeployed, NoInstances, Policy, SchedulerConfig, effective_utilization,
                              order_queue, route_global_iw, route_to_instance)
from oracles import reference_order


def req(name, tier, arrival, d_r, now=100 * SECOND, priority=0):
    deadline = now + d_r
    r = Request(name, arrival, "east", tier, "m", 10, 10, deadline if tier.interactive else None,
                deadline, priority)
    return r


def test_effective_utilization_examples():
    GB = 1
    assert effective_utilization([30 * GB, 50 * GB], [100 * GB, 100 * GB]) == pytest.approx(0.40)
    assert effective_utilization([0, 0], [100, 100]) == 0.0
    assert effective_utilization([100, 100], [100, 100]) == 1.0
    with pytest.raises(NoInstances):
        effective_utilization([], [])


def test_route_global_iw_examples():
    pref = ["A", "B", "C"]
    assert route_global_iw(pref, {"A": 0.72, "B": 0.65, "C": 0.90}, 0.70) == "B"
    assert route_global_iw(pref, {"A": 0.85, "B": 0.80, "C": 0.95}, 0.70) == "B"
    assert route_global_iw(pref, {"A": 0.80, "B": 0.80, "C": 0.95}, 0.70) == "A"
    # a region without instances is never chosen
    assert route_global_iw(pref, {"B": 0.9, "C": 0.95}, 0.70) == "B"
    with pytest.raises(ModelNowhereDeployed):
        route_global_iw(pref, {}, 0.7)


def test_route_to_instance_examples():
    assert route_to_instance([500, 200, 800]) == 1
    assert route_to_instance([0, 0, 0]) == 0
    assert route_to_instance([0, 0, 0], ids=[7, 3, 5]) == 1


def test_edf_example():
    now = 100 * SECOND
    a = req("a", WorkloadTier.IW_N, 1, 5 * SECOND)
    b = req("b", WorkloadTier.IW_N, 2, -2 * SECOND)
    c = req("c", WorkloadTier.IW_N, 3, 30 * SECOND)
    out = order_queue([a, b, c], now, SchedulerConfig(Policy.EDF))
    assert [r.id for r in out] == ["b", "a", "c"]


def test_pf_example():
    q = [req("n1", WorkloadTier.IW_N, 1, 50 * SECOND), req("f2", WorkloadTier.IW_F, 2, 1 * SECOND),
         req("n3", WorkloadTier.IW_N, 3, 50 * SECOND), req("f4", WorkloadTier.IW_F, 4, 1 * SECOND)]
    out = order_queue(q, 100 * SECOND, SchedulerConfig(Policy.PF))
    assert [r.id for r in out] == ["f2", "f4", "n1", "n3"]


def test_dpa_example():
    F, N = WorkloadTier.IW_F, WorkloadTier.IW_N
    q = [req("F", N, 0, -10 * SECOND), req("E", N, 1, 40 * SECOND), req("D", F, 2, 50 * SECOND),
         req("C", N, 3, 8 * SECOND), req("B", F, 4, 5 * SECOND), req("A", F, 5, -60 * SECOND)]
    cfg = SchedulerConfig(Policy.DPA, tau_n=30 * SECOND, tau_p=10 * SECOND)
    out = order_queue(q, 100 * SECOND, cfg)
    assert [r.id for r in out] == ["A", "B", "C", "D", "E", "F"]


def test_priority_one_always_last():
    now = 100 * SECOND
    niw = req("x", WorkloadTier.NIW, 0, -50 * SECOND, priority=1)
    iw = req("y", WorkloadTier.IW_N, 10, 60 * SECOND)
    for policy in Policy:
        out = order_queue([niw, iw], now, SchedulerConfig(policy))
        assert [r.id for r in out] == ["y", "x"]


def test_random_queues_match_reference():
    rng = random.Random(1)
    tiers = [WorkloadTier.IW_F, WorkloadTier.IW_N, WorkloadTier.NIW]
    for trial in range(200):
        now = 1000 * SECOND
        q = []
        for i in range(rng.randint(0, 12)):
            tier = rng.choice(tiers)
            q.append(req(i, tier, rng.randint(0, 50), rng.randint(-120, 120) * SECOND, now,
                         priority=rng.choice([0, 1]) if tier is WorkloadTier.NIW else 0))
        for policy in Policy:
            cfg = SchedulerConfig(policy, tau_n=rng.randint(0, 60) * SECOND, tau_p=rng.randint(0, 30) * SECOND)
            out = order_queue(q, now, cfg)
            assert sorted(r.id for r in out) == sorted(r.id for r in q)
            assert out == reference_order(q, now, policy.value, cfg.tau_n, cfg.tau_p)


def test_dpa_degenerate_thresholds():
    """tau_n = tau_p = 0 with IW-F only: expired first (FCFS), then the rest in arrival order."""
    now = 100 * SECOND
    rng = random.Random(3)
    offsets = [v for v in range(-30, 31) if v != 0]
    q = [req(i, WorkloadTier.IW_F, rng.randint(0, 100), rng.choice(offsets) * SECOND) for i in range(20)]
    out = order_queue(q, now, SchedulerConfig(Policy.DPA, 0, 0))
    expired = sorted((r for r in q if r.remaining_ttft(now) < 0), key=lambda r: r.arrival_ts)
    rest = sorted((r for r in q if r.remaining_ttft(now) > 0), key=lambda r: r.arrival_ts)
    assert out == expired + rest
    # d_r == 0 exactly is "urgent" (0 <= d_r <= tau_p) and leads the unexpired requests
    due_now = req("due", WorkloadTier.IW_F, 999, 0)
    out = order_queue(q + [due_now], now, SchedulerConfig(Policy.DPA, 0, 0))
    assert out == expired + [due_now] + rest
