"""The eight acceptance criteria, each at its stated scale and tolerance.

Every test records one PASS/FAIL line, collected in the terminal summary.
"""

import random
import statistics
import time
from collections import deque

import pytest

from epochstore.bench import graph_from_file, populate_map_heap, time_map_recovery
from epochstore.harness import CrashConfig, CrashReport, PropertyAudit, run_once, run_with_crashes
from epochstore.payload import PayloadLayout, U64Field
from epochstore.persist import BlkType, Heap, HeapGeometry
from epochstore.recovery import recover, reference_filter
from epochstore.runtime import BufferedWB, DirectWB, EpochRuntime, PerEpoch
from epochstore.structures import PersistentHashMap, write_edge_binary

from blocklists import build_heap, random_blocks
from conftest import acceptance_line, advance_to

REC = PayloadLayout("rec", 9, [U64Field("a")])


# 1 -------------------------------------------------------------------------------

@pytest.mark.parametrize("structure", ["queue", "map", "graph"])
def test_c1_buffered_durable_linearizability(structure):
    t0 = time.perf_counter()
    rep = run_with_crashes(structure, crash_points=200, seed=1, threads=4)
    ok = len(rep.records) >= 200 and rep.passed and rep.audit_ok
    acceptance_line(1, f"crash-consistency {structure}", ok,
                    f"{len(rep.records)} crash points, {len(rep.failures)} failures, "
                    f"{rep.runs} runs, {time.perf_counter() - t0:.1f}s")
    assert ok, rep.text()


# 2 -------------------------------------------------------------------------------

def _freed_at(rt, refs, until):
    out = {}
    while rt.epoch < until:
        e = rt.epoch
        rt.advance_epoch()
        for name, ref in refs.items():
            if name not in out and rt.heap.read_header(ref) is None:
                out[name] = e
    return out


def _trace_delete(b, e):
    rt = EpochRuntime(Heap.create(None, HeapGeometry(1 << 20, size_classes=(64, 128)), "sim"))
    ctx = rt.new_context()
    advance_to(rt, b)
    with ctx.operation():
        p = ctx.pnew(REC, a=1)
    advance_to(rt, e)
    with ctx.operation():
        ctx.pdelete(p)
    anti = ctx.to_be_freed[(e + 1) % 4][0]
    return _freed_at(rt, {"payload": p.ref, "anti": anti}, e + 6)


def _trace_retire_reclaim(b, e):
    rt = EpochRuntime(Heap.create(None, HeapGeometry(1 << 20, size_classes=(64, 128)), "sim"))
    ctx = rt.new_context()
    advance_to(rt, b)
    with ctx.operation():
        p = ctx.pnew(REC, a=1)
    advance_to(rt, e)
    with ctx.operation():
        ctx.pretire(p)
        anti = p.anti
        ctx.preclaim(p)
    return _freed_at(rt, {"payload": p.ref, "anti": anti.ref}, e + 6)


def test_c2_lifetime_exactness():
    traces = {}
    for b, e in [(4, 6), (5, 7), (6, 9), (8, 13)]:
        traces[("pdelete", b, e)] = (_trace_delete(b, e), {"payload": e + 2, "anti": e + 3})
        traces[("pretire+preclaim", b, e)] = (_trace_retire_reclaim(b, e),
                                              {"payload": e + 2, "anti": e + 3})
    bad = {k: v for k, v in traces.items() if v[0] != v[1]}

    # allocator reuse audit over 10^5 operations
    audit = PropertyAudit()
    heap = Heap.create(None, HeapGeometry(2 << 20, size_classes=(64, 128)), "sim", track=True)
    rt = EpochRuntime(heap, audit=audit)
    m = PersistentHashMap(rt, buckets=64, value_bytes=16)
    rng = random.Random(2)
    for i in range(100_000):
        key = b"k%d" % rng.randrange(64)
        r = rng.random()
        if r < 0.4:
            m.put(key, b"%d" % i)
        elif r < 0.7:
            m.insert(key, b"%d" % i)
        else:
            m.remove(key)
        if i % 50 == 49:
            rt.advance_epoch()
    rep = audit.report()
    early = len(rep["violations"]["early_reuse"]) + len(rep["violations"]["reclaim_delay"])
    ok = not bad and rep["ok"] and early == 0 and rep["counts"].get("reuses", 0) > 1000
    acceptance_line(2, "lifetime exactness", ok,
                    f"{len(traces)} traces, {len(bad)} off-schedule; "
                    f"{rep['counts'].get('reuses', 0)} audited reuses, {early} early")
    assert not bad, bad
    assert ok, rep


# 3 -------------------------------------------------------------------------------

def test_c3_recovery_filter_differential():
    rng = random.Random(3)
    mismatches = 0
    anti_cases = dedup_cases = 0
    for i in range(10_000):
        crash_epoch = rng.randrange(4, 14)
        blocks = random_blocks(rng, crash_epoch)
        heap, placed = build_heap(blocks, crash_epoch)
        got = {s.ref.offset for s in recover(heap)}
        want = {o for o, _ in reference_filter(placed, crash_epoch)}
        mismatches += got != want
        live = [h for _, h in placed if h.epoch <= crash_epoch - 2]
        dels = {h.uid for h in live if h.blk_type == BlkType.DELETE}
        anti_cases += any(h.uid in dels for h in live if h.blk_type != BlkType.DELETE)
        uids = [h.uid for h in live if h.uid not in dels]
        dedup_cases += len(uids) != len(set(uids))
    ok = mismatches == 0 and anti_cases > 1000 and dedup_cases > 1000
    acceptance_line(3, "recovery filter differential", ok,
                    f"10000 lists, {mismatches} mismatches, {anti_cases} with anti matches, "
                    f"{dedup_cases} with clone dedup")
    assert ok


# 4 -------------------------------------------------------------------------------

def test_c4_audits_and_mutations():
    clean = [run_with_crashes(s, crash_points=60, seed=21, threads=4) for s in ("queue", "map", "graph")]
    clean_ok = all(r.audit_ok and r.passed for r in clean)
    caught = {}
    for mutation in ("skip_fence", "wrong_free_slot", "no_copy_on_old_epoch"):
        rep = run_with_crashes("map", crash_points=200, seed=1, threads=4, mutation=mutation)
        props = sorted({p for a in rep.audits for p, v in a["violations"].items() if v})
        caught[mutation] = (props, len(rep.failures))
    detected = all(props or fails for props, fails in caught.values())
    ok = clean_ok and detected
    acceptance_line(4, "audits clean, mutations detected", ok,
                    "; ".join(f"{m}: audits={p or '-'} prefix_failures={f}"
                              for m, (p, f) in caught.items()))
    assert clean_ok
    assert detected, caught


# 5 -------------------------------------------------------------------------------

def test_c5_persist_ordering():
    cfg = CrashConfig("map", threads=4, ops_per_thread=2500, crash_rate=0.0, site_crash_rate=0.0)
    rep = CrashReport(cfg)
    run_once(cfg, 5, rep)
    a = rep.audits[0]
    violations = len(a["violations"]["persist_order"])
    ok = (a["persist_tracked"] and violations == 0 and a["counts"]["persist_checks"] > 0
          and a["counts"]["ops"] > 0 and not rep.failures)
    acceptance_line(5, "persist ordering", ok,
                    f"10000 workload ops, {a['counts']['ops']} registered with begin_op, "
                    f"{a['counts']['advances']} advances, "
                    f"{a['counts']['persist_checks']} checks, {violations} violations")
    assert ok, a


# 6 -------------------------------------------------------------------------------

class _Probe:
    """Delegating strategy wrapper recording enqueues and drains."""

    def __init__(self, inner):
        self.inner = inner
        self.events = []

    def enqueue(self, ctx, epoch, ref):
        before = getattr(ctx, "drains", 0)
        self.inner.enqueue(ctx, epoch, ref)
        self.events.append(("enq", epoch, ctx.drains != before))

    def end_op(self, ctx):
        self.inner.end_op(ctx)


def _map_workload(rt, n, advance_every, on_advance=None, seed=6):
    m = PersistentHashMap(rt, buckets=128, value_bytes=16)
    rng = random.Random(seed)
    mutating = 0
    for i in range(n):
        key = b"k%d" % rng.randrange(400)
        r = rng.random()
        if r < 0.5:
            m.put(key, b"%d" % i)
            mutating += 1
        elif r < 0.75:
            mutating += m.insert(key, b"%d" % i)
        else:
            mutating += m.remove(key) is not None
        if i % advance_every == advance_every - 1:
            if on_advance:
                on_advance(rt.epoch)
            rt.advance_epoch()
    return mutating


def _buffer_model(events, capacity, drain):
    """Expected drain flags for a sequence of ("enq", epoch) / ("adv", e) events."""
    buf = deque()
    flags = []
    for ev in events:
        if ev[0] == "adv":
            buf = deque(x for x in buf if x != ev[1] - 1)
            continue
        buf.append(ev[1])
        if len(buf) >= capacity:
            older = sorted(buf)
            # oldest epoch first, FIFO within an epoch
            for _ in range(drain):
                buf.remove(older.pop(0))
            flags.append(True)
        else:
            flags.append(False)
    return flags


def test_c6_strategy_counters():
    geo = HeapGeometry(8 << 20, size_classes=(64, 128))
    # PerEpoch: exactly one fence per advance
    heap = Heap.create(None, geo, "sim")
    rt = EpochRuntime(heap, PerEpoch())
    f0, a0 = heap.counters.fences, rt.advances
    _map_workload(rt, 20_000, 100)
    pe_fences, pe_adv = heap.counters.fences - f0, rt.advances - a0
    pe_ok = pe_fences == pe_adv and pe_adv == 200

    # BufferedWB(1000, 1/2): drains exactly when the buffer fills
    heap = Heap.create(None, geo, "sim")
    probe = _Probe(BufferedWB(1000, 0.5))
    rt = EpochRuntime(heap, probe)
    log = probe.events
    _map_workload(rt, 20_000, 2000, on_advance=lambda e: log.append(("adv", e)))
    got = [flag for ev, *rest in log if ev == "enq" for flag in rest[1:]]
    want = _buffer_model(log, 1000, 500)
    ctx = rt.contexts[0]
    bw_ok = got == want and ctx.drains == sum(want) and ctx.drains > 0

    # DirectWB: at least one write-back per mutating operation
    heap = Heap.create(None, geo, "sim")
    rt = EpochRuntime(heap, DirectWB())
    w0 = heap.counters.writes_back
    mutating = _map_workload(rt, 20_000, 100)
    direct_wb = heap.counters.writes_back - w0
    dw_ok = direct_wb >= mutating

    ok = pe_ok and bw_ok and dw_ok
    acceptance_line(6, "strategy counters", ok,
                    f"perepoch fences={pe_fences} advances={pe_adv}; buffered drains="
                    f"{ctx.drains} model={sum(want)}; direct writes_back={direct_wb} "
                    f"mutating_ops={mutating}")
    assert ok


# 7 -------------------------------------------------------------------------------

def test_c7_recovery_scaling_and_graph_rebuild(tmp_path):
    path = tmp_path / "map.heap"
    populate_map_heap(path, 100_000, value_bytes=1024)
    best = {1: float("inf"), 4: float("inf")}
    counts = {}
    ratios = []
    # the sandbox's effective speed drifts by ~30% between runs, so time the two
    # k back to back (alternating order) and judge the median per-round ratio
    for r in range(7):
        secs = {}
        for k in ((1, 4) if r % 2 == 0 else (4, 1)):
            secs[k], counts[k] = time_map_recovery(path, k, 1024, repeats=1)
            best[k] = min(best[k], secs[k])
        ratios.append(secs[4] / secs[1])
    ratio = statistics.median(ratios)
    scale_ok = ratio <= 1.10 and counts == {1: 100_000, 4: 100_000}

    rng = random.Random(7)
    edges = {}
    while len(edges) < 100_000:
        s, d = rng.randrange(10_000), rng.randrange(10_000)
        edges[(s, d)] = (s, d, b"%d" % (len(edges) % 997))
    gpath = tmp_path / "graph.bin"
    write_edge_binary(gpath, edges.values())
    recovered, rebuilt, issues = graph_from_file(gpath, k=4)
    graph_ok = recovered == rebuilt and not issues and len(rebuilt[1]) == 100_000

    ok = scale_ok and graph_ok
    acceptance_line(7, "recovery scaling and graph rebuild", ok,
                    f"map 1e5x1KB best k=1 {best[1]:.2f}s k=4 {best[4]:.2f}s "
                    f"(median paired ratio {ratio:.3f}); graph {len(rebuilt[0])} vertices "
                    f"{len(rebuilt[1])} edges equal={recovered == rebuilt}")
    assert ok


# 8 -------------------------------------------------------------------------------

def test_c8_begin_op_retry_bound():
    audit = PropertyAudit()
    heap = Heap.create(None, HeapGeometry(4 << 20, size_classes=(64, 128)), "sim")
    rt = EpochRuntime(heap, audit=audit)
    m = PersistentHashMap(rt, buckets=64, value_bytes=16)
    ctx = rt.context()
    rng = random.Random(8)

    def adversary(site):
        # tick between the clock read and the registration whenever the
        # advance cannot be blocked by this thread's own stale registration
        if site == "begin_op" and rng.random() < 0.7 and not rt.tracker.blocking(rt.epoch - 1):
            rt.advance_epoch()

    rt.set_yield_hook(adversary)
    for i in range(5000):
        key = b"k%d" % rng.randrange(100)
        if rng.random() < 0.6:
            m.put(key, b"%d" % i)
        else:
            m.remove(key)
        rt.advance_epoch()             # manual tick between every operation
    rt.set_yield_hook(None)
    retries, elapsed = audit.retries[ctx.tid], audit.elapsed[ctx.tid]
    viol = len(audit.violations["retry_bound"])
    ok = viol == 0 and retries <= elapsed and retries > 0 and ctx.begin_retries == retries
    acceptance_line(8, "begin_op retry bound", ok,
                    f"{audit.counts['ops']} ops, {retries} retries, {elapsed} epochs elapsed "
                    f"during begin_op, {viol} violations")
    assert ok
