import random

import pytest

from epochstore.errors import IllFormedLog
from epochstore.harness import (CooperativeScheduler, CrashConfig, CrashReport, OpLog, OpLogEntry,
                                PropertyAudit, oracle_replay, run_once, run_with_crashes)
from epochstore.harness.oracle import log_family
from epochstore.structures import PersistentHashMap

from conftest import runtime


def E(seq, kind, args, result, epoch, domain="q"):
    return OpLogEntry(seq, 1, domain, kind, tuple(args), result, epoch)


# -- oracle ---------------------------------------------------------------

def test_oracle_empty_log():
    assert oracle_replay([], 100) == []
    assert oracle_replay([], 100, family="map") == {}
    assert oracle_replay([], 100, family="graph") == ({}, {})


def test_oracle_queue_cutoff():
    log = [E(1, "enqueue", [b"a"], None, 5), E(2, "enqueue", [b"b"], None, 6),
           E(3, "dequeue", [], b"a", 6)]
    assert oracle_replay(log, 5) == [b"a"]
    assert oracle_replay(log, 6) == [b"b"]
    assert oracle_replay(list(reversed(log)), 6, check_results=True) == [b"b"]


def test_oracle_map_and_graph():
    m = [E(1, "insert", [b"k", b"1"], True, 5), E(2, "put", [b"k", b"2"], b"1", 5),
         E(3, "insert", [b"k", b"3"], False, 6), E(4, "remove", [b"j"], None, 6)]
    assert oracle_replay(m, 9, check_results=True) == {b"k": b"2"}
    g = [E(1, "add_vertex", [1, b""], True, 5), E(2, "add_vertex", [2, b""], True, 5),
         E(3, "add_edge", [1, 2, b"x"], True, 5), E(4, "add_edge", [2, 1, b"y"], True, 5),
         E(5, "clear_vertex", [2], True, 6)]
    assert oracle_replay(g, 5) == ({1: b"", 2: b""}, {(1, 2): b"x", (2, 1): b"y"})
    assert oracle_replay(g, 6, check_results=True) == ({1: b""}, {})


@pytest.mark.parametrize("log", [
    [E(1, "enqueue", [b"a"], None, 5), E(1, "enqueue", [b"b"], None, 5)],
    [E(1, "enqueue", [b"a"], None, 5), E(2, "insert", [b"k", b"v"], True, 5)],
    [E("x", "enqueue", [b"a"], None, 5)],
    [E(1, "add_edge", [1, 2, b""], True, 5)],
])
def test_oracle_ill_formed(log):
    with pytest.raises(IllFormedLog):
        oracle_replay(log, 10)


def test_oracle_result_mismatch():
    log = [E(1, "enqueue", [b"a"], None, 5), E(2, "dequeue", [], b"zzz", 5)]
    assert oracle_replay(log, 5) == []
    with pytest.raises(IllFormedLog):
        oracle_replay(log, 5, check_results=True)


def test_log_family():
    assert log_family([E(1, "put", [b"k", b"v"], None, 5)]) == "map"
    assert log_family([]) is None


def test_oracle_matches_final_map_dump():
    rt = runtime()
    log = OpLog()
    m = PersistentHashMap(rt, buckets=8, value_bytes=16, log=log)
    rng = random.Random(4)
    for i in range(500):
        key = b"k%d" % rng.randrange(30)
        [lambda: m.insert(key, b"%d" % i), lambda: m.put(key, b"%d" % i),
         lambda: m.remove(key)][rng.randrange(3)]()
        if i % 40 == 0:
            rt.advance_epoch()
    top = max(e.epoch for e in log.snapshot())
    assert oracle_replay(log.snapshot(), top, check_results=True) == m.snapshot()
    assert all(isinstance(e.to_json()["args"], list) for e in log.snapshot())


# -- scheduler ------------------------------------------------------------

def _trace(seed):
    s = CooperativeScheduler(seed)
    out = []

    def w(name):
        def body():
            for i in range(20):
                out.append((name, i))
                s.yield_("x")
        return body

    for n in "abc":
        s.add(n, w(n))
    s.run()
    return out


def test_scheduler_deterministic():
    assert _trace(3) == _trace(3)
    assert _trace(3) != _trace(4)
    assert sorted(_trace(5)) == sorted((n, i) for n in "abc" for i in range(20))


def test_scheduler_propagates_errors():
    s = CooperativeScheduler(1)

    def bad():
        s.yield_()
        raise ValueError("boom")

    def loop():
        for _ in range(1000):
            s.yield_()

    s.add("bad", bad)
    s.add("loop", loop)
    with pytest.raises(ValueError):
        s.run()


# -- crash runs -----------------------------------------------------------

SMALL = dict(threads=3, ops_per_thread=60, advance_every=10)


@pytest.mark.parametrize("structure", ["queue", "map", "graph"])
def test_crash_runs_pass(structure):
    rep = run_with_crashes(structure, crash_points=40, seed=11, **SMALL)
    assert len(rep.records) >= 40
    assert rep.passed, rep.text()
    assert rep.audit_ok


def test_crash_before_first_advance():
    cfg = CrashConfig("map", threads=2, ops_per_thread=40, advance_every=10 ** 9, crash_rate=0.2)
    rep = CrashReport(cfg)
    run_once(cfg, 7, rep)
    assert rep.records and rep.passed
    assert {r.crash_epoch for r in rep.records} == {4}
    assert {r.ops_in_prefix for r in rep.records} == {0}


def test_crash_at_advance_step_boundaries():
    rep = run_with_crashes("queue", crash_points=30, seed=2, crash_rate=0.0, site_crash_rate=1.0,
                           **SMALL)
    sites = rep.site_counts()
    for site in ("advance:writeback", "advance:fence", "advance:reclaim", "advance:clock"):
        assert sites.get(site, 0) > 0
    assert rep.passed, rep.text()


def test_crash_report_deterministic():
    a = run_with_crashes("graph", crash_points=20, seed=5, **SMALL)
    b = run_with_crashes("graph", crash_points=20, seed=5, **SMALL)
    assert a.jsonl() == b.jsonl()
    assert a.text() == b.text()


@pytest.mark.parametrize("mutation,prop", [
    ("skip_fence", "persist_order"),
    ("wrong_free_slot", "reclaim_delay"),
    ("no_copy_on_old_epoch", "labels"),
])
def test_mutations_detected(mutation, prop):
    rep = run_with_crashes("map", crash_points=40, seed=1, mutation=mutation, **SMALL)
    assert not rep.audit_ok
    assert any(a["violations"][prop] for a in rep.audits)


def test_audit_clean_manual_run():
    audit = PropertyAudit()
    rt = runtime(audit=audit)
    m = PersistentHashMap(rt, buckets=8, value_bytes=16)
    for i in range(300):
        m.put(b"k%d" % (i % 20), b"%d" % i)
        if i % 7 == 0:
            m.remove(b"k%d" % (i % 13))
        if i % 11 == 0:
            rt.advance_epoch()
    rep = audit.report()
    assert rep["ok"] and rep["persist_tracked"]
    assert rep["counts"]["persist_checks"] > 0 and rep["counts"]["reclaims"] > 0
