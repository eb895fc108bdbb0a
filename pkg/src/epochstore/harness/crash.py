"""Crash-injection runs: concurrent workloads, sampled crash images, recovery
and comparison against the sequential oracle."""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field

from ..errors import MissingVertex
from ..persist.heap import Heap
from ..persist.layout import HeapGeometry
from ..recovery import recover, resume
from ..runtime import EpochRuntime, make_strategy
from ..structures import STRUCTURES
from .audit import PropertyAudit
from .oplog import OpLog
from .oracle import oracle_replay
from .scheduler import CooperativeScheduler

VALUE_BYTES = 16
ADVANCE_SITES = ("advance:writeback", "advance:fence", "advance:reclaim", "advance:clock")


@dataclass
class CrashConfig:
    structure: str = "map"
    threads: int = 4
    ops_per_thread: int = 300
    advance_every: int = 50          # operations between harness-driven advances
    crash_rate: float = 0.02         # chance of a crash point at an ordinary yield step
    site_crash_rate: float = 0.25    # chance at advance-step boundaries
    eviction_rate: float = 0.05      # spontaneous cache evictions per write
    recovery_threads: int = 2
    key_range: int = 24
    vertex_range: int = 12
    strategy: str = "perepoch"
    mutation: str | None = None
    heap_bytes: int = 2 << 20

    def structure_args(self) -> dict:
        if self.structure == "map":
            return {"buckets": 16, "value_bytes": VALUE_BYTES}
        if self.structure == "graph":
            return {"attr_bytes": VALUE_BYTES}
        return {"value_bytes": VALUE_BYTES}


@dataclass
class CrashRecord:
    structure: str
    run_seed: int
    crash_index: int
    step: int
    site: str
    eviction_seed: int
    crash_epoch: int
    ops_logged: int
    ops_in_prefix: int
    verdict: str
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class CrashReport:
    config: CrashConfig
    records: list[CrashRecord] = field(default_factory=list)
    audits: list[dict] = field(default_factory=list)
    runs: int = 0

    @property
    def failures(self) -> list[CrashRecord]:
        return [r for r in self.records if r.verdict != "pass"]

    @property
    def passed(self) -> bool:
        return bool(self.records) and not self.failures

    @property
    def audit_ok(self) -> bool:
        return all(a["ok"] for a in self.audits)

    def site_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.site] = out.get(r.site, 0) + 1
        return out

    def text(self) -> str:
        lines = [f"structure={self.config.structure} threads={self.config.threads} "
                 f"runs={self.runs} crash_points={len(self.records)} "
                 f"failures={len(self.failures)} audits_ok={self.audit_ok}"]
        for site, n in sorted(self.site_counts().items()):
            lines.append(f"  site {site or '-'}: {n}")
        for r in self.failures[:10]:
            lines.append(f"  FAIL seed={r.run_seed} step={r.step} site={r.site} "
                         f"eviction_seed={r.eviction_seed} crash_epoch={r.crash_epoch}: {r.detail}")
        return "\n".join(lines)

    def jsonl(self) -> str:
        return "\n".join(r.to_json() for r in self.records)


def make_heap(cfg: CrashConfig, seed: int) -> Heap:
    geo = HeapGeometry(cfg.heap_bytes, size_classes=(128, 256))
    return Heap.create(None, geo, "sim", eviction_rate=cfg.eviction_rate, seed=seed, track=True)


def recovered_state(image, structure: str, k: int, args: dict):
    """Recover a structure from a crash image; returns (abstract state, issues, crash_epoch)."""
    heap, crash_epoch = Heap.from_image(image)
    rs = recover(heap, k)
    resume(heap, rs)
    rt = EpochRuntime(heap)
    s = STRUCTURES[structure].recover(rt, rs, k, **args)
    return s.snapshot(), s.recovery_issues, crash_epoch


def _worker_ops(cfg: CrashConfig, s, rng: random.Random, wid: int):
    """Generator of zero-argument callables, one per workload operation."""
    val = lambda i: f"{wid}:{i}".encode()
    for i in range(cfg.ops_per_thread):
        r = rng.random()
        if cfg.structure == "queue":
            yield (lambda v=val(i): s.enqueue(v)) if r < 0.5 else s.dequeue
        elif cfg.structure == "map":
            key = b"k%d" % rng.randrange(cfg.key_range)
            if r < 0.4:
                yield lambda key=key: s.get(key)
            elif r < 0.6:
                yield lambda key=key, v=val(i): s.insert(key, v)
            elif r < 0.8:
                yield lambda key=key: s.remove(key)
            else:
                yield lambda key=key, v=val(i): s.put(key, v)
        else:
            a, b = rng.randrange(cfg.vertex_range), rng.randrange(cfg.vertex_range)
            if r < 0.25:
                yield lambda a=a, v=val(i): s.add_vertex(a, v)
            elif r < 0.6:
                yield lambda a=a, b=b, v=val(i): s.add_edge(a, b, v)
            elif r < 0.75:
                yield lambda a=a, b=b: s.remove_edge(a, b)
            elif r < 0.9:
                yield lambda a=a, b=b: s.get_edge(a, b)
            else:
                yield lambda a=a: s.clear_vertex(a)


def run_once(cfg: CrashConfig, seed: int, report: CrashReport) -> None:
    """One deterministic scheduled run with crash points sampled along the way."""
    heap = make_heap(cfg, seed)
    audit = PropertyAudit()
    rt = EpochRuntime(heap, make_strategy(cfg.strategy), audit=audit, mutation=cfg.mutation)
    log = OpLog()
    args = cfg.structure_args()
    s = STRUCTURES[cfg.structure](rt, log=log, **args)
    sched = CooperativeScheduler(seed)
    rt.set_yield_hook(sched.yield_)
    crash_rng = random.Random(seed ^ 0x5EED)
    state = {"ops": 0, "advances_due": 0, "crashes": 0}
    workers = [f"w{i}" for i in range(cfg.threads)]

    def on_step(site):
        rate = cfg.site_crash_rate if site in ADVANCE_SITES else cfg.crash_rate
        if crash_rng.random() >= rate:
            return
        ev_seed = crash_rng.randrange(1 << 30)
        image = heap.crash_image(ev_seed)
        entries = log.snapshot()
        idx = len(report.records)
        rec = CrashRecord(cfg.structure, seed, idx, sched.steps, site, ev_seed,
                          image.crash_epoch, len(entries), 0, "pass")
        try:
            cutoff = image.crash_epoch - 2
            rec.ops_in_prefix = sum(1 for e in entries if e.epoch <= cutoff)
            got, issues, _ = recovered_state(image, cfg.structure, cfg.recovery_threads, args)
            want = oracle_replay(entries, cutoff, family=cfg.structure)
            if issues:
                rec.verdict, rec.detail = "fail", "; ".join(issues[:3])
            elif got != want:
                rec.verdict, rec.detail = "fail", _diff(got, want)
        except Exception as exc:        # report, keep sampling
            rec.verdict, rec.detail = "error", f"{type(exc).__name__}: {exc}"
        report.records.append(rec)
        state["crashes"] += 1

    sched.on_step = on_step

    def worker(wid):
        def body():
            rng = random.Random(seed * 1000 + wid)
            for op in _worker_ops(cfg, s, rng, wid):
                sched.set_critical(True)
                try:
                    op()
                except MissingVertex:
                    pass
                finally:
                    sched.set_critical(False)
                state["ops"] += 1
                if state["ops"] % cfg.advance_every == 0:
                    state["advances_due"] += 1
                sched.yield_("between")
        return body

    def advancer():
        while True:
            if state["advances_due"]:
                rt.advance_epoch()
                state["advances_due"] -= 1
            elif sched.workers_done("adv"):
                return
            sched.yield_("idle")

    for i, name in enumerate(workers):
        sched.add(name, worker(i))
    sched.add("adv", advancer,
              runnable=lambda: state["advances_due"] > 0 or sched.workers_done("adv"))
    sched.run()
    rt.set_yield_hook(None)

    # no-crash consistency: the full log replays to the final transient state
    final = oracle_replay(log.snapshot(), 1 << 62, family=cfg.structure, check_results=True)
    if final != s.snapshot():
        report.records.append(CrashRecord(cfg.structure, seed, len(report.records), sched.steps,
                                          "final", 0, rt.epoch, len(log), len(log), "fail",
                                          "final transient state differs from log replay"))
    report.audits.append(audit.report())
    report.runs += 1


def _diff(got, want) -> str:
    if isinstance(want, dict):
        extra = sorted(set(got) - set(want))[:3]
        missing = sorted(set(want) - set(got))[:3]
        changed = sorted(k for k in set(got) & set(want) if got[k] != want[k])[:3]
        return f"extra={extra} missing={missing} changed={changed}"
    if isinstance(want, tuple):
        return f"vertices {_diff(got[0], want[0])}; edges {_diff(got[1], want[1])}"
    return f"recovered {len(got)} items {got[:3]}..., oracle {len(want)} items {want[:3]}..."


def run_with_crashes(structure: str = "map", crash_points: int = 200, seed: int = 1,
                     max_runs: int = 50, **overrides) -> CrashReport:
    """Repeat scheduled runs (seeds seed, seed+1, ...) until ``crash_points`` crashes were checked."""
    cfg = CrashConfig(structure=structure, **overrides)
    report = CrashReport(cfg)
    run_seed = seed
    while len(report.records) < crash_points and report.runs < max_runs:
        run_once(cfg, run_seed, report)
        run_seed += 1
    return report
