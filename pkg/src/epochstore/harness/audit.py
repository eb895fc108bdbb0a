"""Runtime audit hooks checking the epoch-labeling and persistence properties.

Attach a PropertyAudit to an EpochRuntime (``EpochRuntime(..., audit=a)``).
The persist-ordering check needs a SimBackend created with ``track=True``.
"""

from __future__ import annotations

import threading
from collections import defaultdict

from ..persist.backends import SimBackend, _lines


class PropertyAudit:

    def __init__(self, max_examples: int = 20):
        self.max_examples = max_examples
        self.violations: dict[str, list[str]] = defaultdict(list)
        self.counts: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()
        self.rt = None
        self.backend = None
        self._pending: dict[int, list] = defaultdict(list)     # epoch -> [(line, seq)]
        self._free_slot: dict[int, int] = {}                    # offset -> slot epoch
        self._reuse_floor: dict[int, int] = {}                  # offset -> min clock for reuse
        self._cas: dict[int, list] = defaultdict(list)
        self.retries: dict[int, int] = defaultdict(int)
        self.elapsed: dict[int, int] = defaultdict(int)

    # -- wiring ------------------------------------------------------------
    def attach(self, rt) -> None:
        self.rt = rt
        be = rt.heap.backend
        self.backend = be if isinstance(be, SimBackend) and be.track else None

    def _fail(self, prop: str, msg: str) -> None:
        with self._lock:
            self.counts[prop + "_violations"] += 1
            if len(self.violations[prop]) < self.max_examples:
                self.violations[prop].append(msg)

    # -- operation hooks ---------------------------------------------------
    def op_begin(self, ctx, epoch, first_seen, retries) -> None:
        self.counts["ops"] += 1
        self.retries[ctx.tid] += retries
        self.elapsed[ctx.tid] += epoch - first_seen
        if retries > epoch - first_seen:
            self._fail("retry_bound", f"thread {ctx.tid}: {retries} retries while the clock "
                                      f"moved {first_seen}->{epoch}")

    def op_end(self, ctx) -> None:
        pass

    def touch(self, ctx, uid, label) -> None:
        self.counts["labels"] += 1
        if label != ctx.op_epoch:
            self._fail("labels", f"thread {ctx.tid} op in epoch {ctx.op_epoch} "
                                 f"left uid {uid} labeled {label}")

    def old_see_new(self, ctx, p) -> None:
        self.counts["old_see_new"] += 1

    def persist_enqueue(self, ctx, epoch, ref) -> None:
        be = self.backend
        if be is None:
            return
        with be.lock:
            rec = [(ln, be.line_seq(ln)) for ln in _lines(ref.offset, ref.len, be.line)]
        with self._lock:
            self._pending[epoch].append(rec)

    def cas(self, cell, counter, epoch) -> None:
        with self._lock:
            self._cas[cell.id].append((counter, epoch))

    # -- advance hooks -------------------------------------------------------
    def advance_begin(self, epoch) -> None:
        self.counts["advances"] += 1

    def advance_end(self, epoch) -> None:
        pass

    def clock_store(self, value) -> None:
        """Everything labeled <= value-2 must already be durable."""
        be = self.backend
        if be is None:
            return
        with self._lock:
            due = [e for e in self._pending if e <= value - 2]
            recs = [(e, self._pending.pop(e)) for e in due]
        with be.lock:
            for e, lst in recs:
                for rec in lst:
                    self.counts["persist_checks"] += 1
                    lag = [ln for ln, seq in rec if be.durable_seq(ln) < seq]
                    if lag:
                        self._fail("persist_order", f"clock {value} stored while lines {lag} "
                                                    f"labeled {e} were not durable")

    def free_enqueue(self, ref, slot_epoch) -> None:
        with self._lock:
            self._free_slot[ref.offset] = slot_epoch

    def scrub(self, ref, advancing_from) -> None:
        with self._lock:
            f = self._free_slot.pop(ref.offset, None)
        if f is None:
            return
        self.counts["reclaims"] += 1
        if advancing_from < f + 2:
            self._fail("reclaim_delay", f"block {ref.offset} queued for epoch {f} reclaimed "
                                        f"during advance from {advancing_from}")
        with self._lock:
            self._reuse_floor[ref.offset] = f + 3

    def alloc(self, ref, clock) -> None:
        with self._lock:
            floor = self._reuse_floor.pop(ref.offset, None)
        if floor is None:
            return
        self.counts["reuses"] += 1
        if clock < floor:
            self._fail("early_reuse", f"block {ref.offset} reused at clock {clock}, "
                                      f"allowed from {floor}")

    # -- results -------------------------------------------------------------
    def cas_consistent(self) -> bool:
        ok = True
        for cid, lst in self._cas.items():
            lst = sorted(lst)
            counters = [c for c, _ in lst]
            if counters != list(range(counters[0], counters[0] + len(counters))):
                self._fail("cas_log", f"cell {cid}: counter gaps {counters[:10]}")
                ok = False
            epochs = [e for _, e in lst]
            if any(a > b for a, b in zip(epochs, epochs[1:])):
                self._fail("cas_log", f"cell {cid}: epochs out of counter order")
                ok = False
        return ok

    PROPERTIES = ("labels", "persist_order", "reclaim_delay", "early_reuse", "retry_bound", "cas_log")

    def report(self) -> dict:
        self.cas_consistent()
        return {
            "ok": not any(self.violations.values()),
            "persist_tracked": self.backend is not None,
            "violations": {p: list(self.violations.get(p, ())) for p in self.PROPERTIES},
            "counts": dict(self.counts),
        }

    @property
    def ok(self) -> bool:
        return self.report()["ok"]

    def failed(self, prop: str) -> bool:
        return bool(self.violations.get(prop))
