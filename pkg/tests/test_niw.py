from types import SimpleNamespace

from fleetsim.domain import HOUR, MINUTE, SECOND
from fleetsim.niw import DeferredQueue, NiwConfig


def item(name, deadline=24 * HOUR, priority=1, service=0):
    return SimpleNamespace(name=name, priority=priority, completion_deadline=deadline, service_ms=service,
                           enqueue_ts=None)


def filled(names, now=0):
    q = DeferredQueue(NiwConfig(), service_estimate=lambda i: i.service_ms,
                      max_service_estimate=lambda m: 10 * MINUTE)
    for n in names:
        q.enqueue("m", item(n, now + 24 * HOUR), now)
    return q


def test_signal_releases_one_or_two():
    q = filled("abc")
    assert [i.name for i in q.on_capacity_signal("m", "east", 0.55, 0)] == ["a"]
    q = filled("abc")
    assert [i.name for i in q.on_capacity_signal("m", "east", 0.45, 0)] == ["a", "b"]
    q = filled("abc")
    assert q.on_capacity_signal("m", "east", 0.62, 0) == []
    assert q.on_capacity_signal("other", "east", 0.1, 0) == []


def test_enqueue_fifo_and_length():
    q = filled("")
    for n in "xyz":
        before = q.length("m")
        q.enqueue("m", item(n), 0)
        assert q.length("m") == before + 1
    assert [i.name for i in q.on_capacity_signal("m", "e", 0.0, 0)] == ["x", "y"]
    assert [i.name for i in q.on_capacity_signal("m", "e", 0.0, 0)] == ["z"]
    assert q.released <= q.enqueued


def test_escalation_boundary():
    q = filled("ab")
    assert q.escalate(10 * HOUR - MINUTE) == 0
    assert all(i.priority == 1 for i in q.queues["m"])
    assert q.escalate(10 * HOUR + SECOND) == 2
    assert all(i.priority == 0 for i in q.queues["m"])
    assert filled("").escalate(HOUR) == 0


def test_young_request_keeps_priority():
    q = filled("")
    q.enqueue("m", item("old"), 0)
    q.enqueue("m", item("young"), HOUR + 2 * MINUTE)
    q.escalate(10 * HOUR + SECOND + MINUTE)
    old, young = q.queues["m"]
    assert old.priority == 0 and young.priority == 1


def test_force_release_before_deadline():
    q = DeferredQueue(NiwConfig(), service_estimate=lambda i: i.service_ms,
                      max_service_estimate=lambda m: 5 * MINUTE)
    q.enqueue("m", item("tight", deadline=HOUR, service=5 * MINUTE), 0)
    q.enqueue("m", item("loose", deadline=24 * HOUR, service=5 * MINUTE), 0)
    assert q.due_for_release(HOUR - 11 * MINUTE) == []
    due = q.due_for_release(HOUR - 9 * MINUTE)
    assert [i.name for _m, i in due] == ["tight"]
    assert [i.name for i in q.queues["m"]] == ["loose"]
