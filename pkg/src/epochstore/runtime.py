"""Epoch-based buffered persistence runtime.

Operations register in the current epoch, label every payload they create
or modify with that epoch, and queue those blocks for write-back.  An
advance of the global clock from ``e`` waits out operations still running
in ``e-1``, writes back everything queued for ``e-1``, fences, reclaims
blocks deleted in ``e-2`` and bumps the clock.  After a crash whose durable
clock reads ``c``, only payloads labeled ``<= c-2`` are trusted.
"""

from __future__ import annotations

import contextlib
import logging
import math
import threading
import time
from dataclasses import dataclass

from .errors import EpochAdvanced, OldSeeNewException, OperationStateError, RuntimeStateError
from .payload import PayloadHandle, PayloadLayout
from .persist.heap import Heap
from .persist.layout import BlkType, BlockRef

log = logging.getLogger(__name__)

UID_BLOCK = 1 << 16
MUTATIONS = ("skip_fence", "wrong_free_slot", "no_copy_on_old_epoch")


# -- write-back strategies ---------------------------------------------

class PerEpoch:
    """Queue every written block; the advancer writes them back one epoch later."""

    name = "perepoch"

    def enqueue(self, ctx, epoch, ref):
        with ctx.lock:
            ctx.to_be_persisted[epoch % 4].append(ref)

    def end_op(self, ctx):
        pass

    def __repr__(self):
        return "PerEpoch()"


class BufferedWB(PerEpoch):
    """Bounded per-thread buffer; when it fills, the oldest part is written back
    on the worker thread."""

    name = "buffered"

    def __init__(self, capacity: int = 1000, drain_fraction: float = 0.5):
        if capacity < 1 or not 0 < drain_fraction <= 1:
            raise ValueError("capacity >= 1 and 0 < drain_fraction <= 1 required")
        self.capacity = capacity
        self.drain_fraction = drain_fraction
        self.drain_count = math.ceil(capacity * drain_fraction)

    def enqueue(self, ctx, epoch, ref):
        with ctx.lock:
            ctx.to_be_persisted[epoch % 4].append(ref)
            ctx.buffered += 1
            if ctx.buffered < self.capacity:
                return
            victims = []
            need = self.drain_count
            # at most two epochs are buffered at once; oldest first
            for e in sorted({epoch - 1, epoch}):
                slot = ctx.to_be_persisted[e % 4]
                k = min(need, len(slot))
                victims += slot[:k]
                del slot[:k]
                need -= k
            ctx.buffered -= len(victims)
            ctx.drains += 1
        heap = ctx.rt.heap
        for r in victims:
            heap.write_back_ref(r)

    def __repr__(self):
        return f"BufferedWB({self.capacity}, {self.drain_fraction})"


class DirectWB:
    """Every operation writes back its own blocks as it ends."""

    name = "direct"

    def enqueue(self, ctx, epoch, ref):
        ctx.op_writes.append(ref)

    def end_op(self, ctx):
        heap = ctx.rt.heap
        seen = set()
        for r in ctx.op_writes:
            if r.offset not in seen:
                seen.add(r.offset)
                heap.write_back_ref(r)
        ctx.op_writes.clear()

    def __repr__(self):
        return "DirectWB()"


def make_strategy(name: str, capacity: int = 1000, drain_fraction: float = 0.5):
    if name == "perepoch":
        return PerEpoch()
    if name == "buffered":
        return BufferedWB(capacity, drain_fraction)
    if name == "direct":
        return DirectWB()
    raise ValueError(f"unknown write-back strategy {name!r}")


@dataclass(frozen=True)
class AdvancerConfig:
    mode: str = "background"        # or "manual"
    interval: float = 0.050

    def __post_init__(self):
        if self.mode not in ("background", "manual"):
            raise ValueError(f"unknown advancer mode {self.mode!r}")
        if self.interval <= 0:
            raise ValueError("interval must be positive")

    @classmethod
    def manual(cls):
        return cls("manual")


# -- transient bookkeeping ----------------------------------------------

class OperationTracker:
    """Per-thread (active, epoch) announcements scanned by the advancer."""

    def __init__(self):
        self._slots: dict[int, list] = {}
        self._lock = threading.Lock()

    def register(self, tid: int, epoch: int) -> None:
        slot = self._slots.get(tid)
        if slot is None:
            with self._lock:
                slot = self._slots.setdefault(tid, [False, 0])
        slot[1] = epoch
        slot[0] = True

    def unregister(self, tid: int) -> None:
        slot = self._slots.get(tid)
        if slot is not None:
            slot[0] = False

    def active(self) -> dict[int, int]:
        return {tid: s[1] for tid, s in list(self._slots.items()) if s[0]}

    def blocking(self, epoch: int) -> bool:
        return any(s[0] and s[1] <= epoch for s in list(self._slots.values()))

    def wait_all(self, epoch: int, pause=None) -> None:
        """Return once no registered operation is active in ``epoch`` or earlier."""
        spins = 0
        while self.blocking(epoch):
            if pause is not None:
                pause()
            else:
                time.sleep(0 if spins < 100 else 1e-4)
            spins += 1


class VersionedCell:
    """A shared (value, counter) word pair updated by CAS."""

    _ids = iter(range(1, 1 << 62))

    def __init__(self, value=None):
        self.id = next(self._ids)
        self._lock = threading.Lock()
        self._value = value
        self._counter = 0

    def read(self) -> tuple:
        with self._lock:
            return self._value, self._counter

    def compare_and_swap(self, expected: tuple, desired) -> int | None:
        """Install ``desired`` if (value, counter) equals ``expected``; return the new counter."""
        with self._lock:
            if (self._value, self._counter) != tuple(expected):
                return None
            self._value = desired
            self._counter += 1
            return self._counter


class ThreadContext:
    """Per-thread operation state and the four-slot persist/free rings."""

    def __init__(self, rt: EpochRuntime, tid: int):
        self.rt = rt
        self.tid = tid
        self.op_epoch: int | None = None
        self.to_be_persisted: list[list[BlockRef]] = [[] for _ in range(4)]
        self.to_be_freed: list[list[BlockRef]] = [[] for _ in range(4)]
        self.lock = threading.Lock()
        self.buffered = 0
        self.drains = 0
        self.op_writes: list[BlockRef] = []
        self.begin_retries = 0
        self._uids = iter(())
        self._op_seq = 0

    def __repr__(self):
        return f"<ThreadContext tid={self.tid} op_epoch={self.op_epoch}>"

    # -- operation bracketing -----------------------------------------
    def begin_op(self, *pre_created: PayloadHandle) -> int:
        if self.op_epoch is not None:
            raise OperationStateError(f"thread {self.tid} already in an operation")
        rt = self.rt
        first = rt._epoch
        retries = 0
        while True:
            e = rt._epoch
            rt._yield("begin_op")
            rt.tracker.register(self.tid, e)
            if rt._epoch == e:
                break
            retries += 1
        self.op_epoch = e
        self.begin_retries += retries
        self._op_seq += 1
        if rt.audit is not None:
            rt.audit.op_begin(self, e, first, retries)
        for p in pre_created:
            if p.epoch is not None:
                raise OperationStateError(f"{p!r} was already stamped")
            self._stamp(p)
        return e

    def end_op(self) -> None:
        if self.op_epoch is None:
            raise OperationStateError(f"thread {self.tid} has no active operation")
        self.rt.strategy.end_op(self)
        if self.rt.audit is not None:
            self.rt.audit.op_end(self)
        self.op_epoch = None
        self.rt.tracker.unregister(self.tid)

    @contextlib.contextmanager
    def operation(self, *pre_created: PayloadHandle):
        """begin_op ... end_op around a block, ending even on error."""
        self.begin_op(*pre_created)
        try:
            yield self
        finally:
            self.end_op()

    @property
    def in_op(self) -> bool:
        return self.op_epoch is not None

    def check_epoch(self) -> None:
        self._require_op()
        now = self.rt._epoch
        if now != self.op_epoch:
            raise EpochAdvanced(self.op_epoch, now)

    # -- helpers ------------------------------------------------------
    def _require_op(self):
        if self.op_epoch is None:
            raise OperationStateError("payload mutation outside begin_op/end_op")

    def _verify(self, p: PayloadHandle) -> None:
        op = self.op_epoch
        if op is not None and p.epoch is not None and p.epoch > op:
            if self.rt.audit is not None:
                self.rt.audit.old_see_new(self, p)
            raise OldSeeNewException(op, p.epoch)

    def _next_uid(self) -> int:
        uid = next(self._uids, None)
        if uid is None:
            self._uids = iter(self.rt.heap.reserve_uids(UID_BLOCK))
            uid = next(self._uids)
        return uid

    def _persist(self, ref: BlockRef) -> None:
        self.rt.strategy.enqueue(self, self.op_epoch, ref)
        if self.rt.audit is not None:
            self.rt.audit.persist_enqueue(self, self.op_epoch, ref)

    def _touch(self, p: PayloadHandle) -> None:
        if self.rt.audit is not None:
            self.rt.audit.touch(self, p.uid, p.epoch)

    def _write_header(self, p: PayloadHandle) -> None:
        # DELETE headers never carry a payload, even when flipped in place
        plen = 0 if p.blk_type == BlkType.DELETE else p.payload_len
        self.rt.heap.write_header(p.ref, p.blk_type, p.epoch, p.uid, plen)

    def _stamp(self, p: PayloadHandle) -> None:
        p.epoch = self.op_epoch
        # payload bytes are already in place; the header (and its magic) go last
        self._write_header(p)
        self._persist(p.ref)
        self._touch(p)

    def _alloc(self, payload_len: int) -> BlockRef:
        ref = self.rt.heap.alloc_block(payload_len)
        if self.rt.audit is not None:
            self.rt.audit.alloc(ref, self.rt._epoch)
        return ref

    def _defer_free(self, ref: BlockRef, slot_epoch: int) -> None:
        with self.lock:
            self.to_be_freed[slot_epoch % 4].append(ref)
        if self.rt.audit is not None:
            self.rt.audit.free_enqueue(ref, slot_epoch)

    def _free_now(self, ref: BlockRef) -> None:
        self.rt.heap.free_block(ref)
        self.rt.heap.write_back_tombstones()
        if self.rt.audit is not None:
            self.rt.audit.persist_enqueue(self, self.op_epoch, BlockRef(ref.offset, self.rt.heap.line))

    def _new_anti(self, p: PayloadHandle) -> PayloadHandle:
        ref = self._alloc(0)
        anti = PayloadHandle(ref, None, BlkType.DELETE, self.op_epoch, p.uid)
        self._write_header(anti)
        self._persist(ref)
        self._touch(anti)
        return anti

    # -- payload API ----------------------------------------------------
    def pnew(self, layout: PayloadLayout, **fields) -> PayloadHandle:
        """Allocate a payload; stamped now if inside an operation, else at begin_op."""
        data = layout.encode(fields)
        ref = self._alloc(layout.size)
        heap = self.rt.heap
        heap.write(ref.payload_offset, data)
        p = PayloadHandle(ref, layout, BlkType.ALLOC, None, self._next_uid())
        if self.op_epoch is not None:
            self._stamp(p)
            self.rt._yield("op")
        return p

    def pdelete(self, p: PayloadHandle) -> None:
        self._require_op()
        self._verify(p)
        op = self.op_epoch
        if p.epoch is None:
            # never published
            self._free_now(p.ref)
        elif p.epoch == op:
            if p.blk_type == BlkType.ALLOC:
                self._free_now(p.ref)
            else:
                p.blk_type = BlkType.DELETE
                self._write_header(p)
                self._persist(p.ref)
                self._touch(p)
                # the flipped block nullifies its predecessor version, so it
                # must outlive that version's tombstone
                after = op if p.superseded_in is None else max(op, p.superseded_in + 1)
                self._defer_free(p.ref, after)
        else:
            anti = self._new_anti(p)
            self._defer_free(anti.ref, op + 1)
            self._defer_free(p.ref, op)
        self.rt._yield("op")

    def get(self, p: PayloadHandle, name: str):
        self._verify(p)
        return self.get_unsafe(p, name)

    def get_unsafe(self, p: PayloadHandle, name: str):
        f, off = p.layout.field(name)
        raw = self.rt.heap.read(p.ref.payload_offset + off, f.size)
        return f.decode(raw, 0)

    def read_all(self, p: PayloadHandle) -> dict:
        self._verify(p)
        return p.layout.decode(self.rt.heap.read(p.ref.payload_offset, p.layout.size))

    def set(self, p: PayloadHandle, name: str, value) -> PayloadHandle:
        """Write one field; returns the handle now holding the payload.

        A payload labeled with an older epoch is copied into a fresh UPDATE
        block; callers must replace every reference to ``p`` with the result.
        """
        self._require_op()
        self._verify(p)
        if p.epoch is None:
            raise OperationStateError(f"{p!r} is unstamped; pass it to begin_op first")
        op = self.op_epoch
        f, off = p.layout.field(name)
        enc = f.encode(value)
        heap = self.rt.heap
        if p.epoch == op or self.rt.mutation == "no_copy_on_old_epoch":
            heap.write(p.ref.payload_offset + off, enc)
            self._persist(p.ref)
            self._touch(p)
            self.rt._yield("op")
            return p
        body = bytearray(heap.read(p.ref.payload_offset, p.layout.size))
        body[off:off + len(enc)] = enc
        ref = self._alloc(p.layout.size)
        heap.write(ref.payload_offset, body)
        q = PayloadHandle(ref, p.layout, BlkType.UPDATE, op, p.uid)
        q.superseded_in = op
        self._write_header(q)
        self._persist(ref)
        self._touch(q)
        self._defer_free(p.ref, op)
        self.rt._yield("op")
        return q

    def pretire(self, p: PayloadHandle) -> None:
        self._require_op()
        self._verify(p)
        op = self.op_epoch
        if p.epoch == op:
            p.blk_type = BlkType.DELETE
            self._write_header(p)
            self._touch(p)
        else:
            p.anti = self._new_anti(p)
        self._persist(p.ref)
        self.rt._yield("op")

    def preclaim(self, p: PayloadHandle) -> None:
        self._require_op()
        self._verify(p)
        op = self.op_epoch
        if p.anti is None:
            if p.blk_type != BlkType.DELETE:
                self.pdelete(p)
                return
            retired = p.epoch
            pred = p.superseded_in
            if pred is None:
                if retired < op - 1:
                    self._free_now(p.ref)
                else:
                    self._defer_free(p.ref, op)
            else:
                # a retired clone must outlive its predecessor's durable tombstone
                if retired < op - 1 and op >= pred + 4:
                    self._free_now(p.ref)
                else:
                    self._defer_free(p.ref, max(op, pred + 1))
        else:
            anti = p.anti
            self._verify(anti)
            if anti.epoch < op - 2:
                # the clock is durable at >= op-1, so any crash that can see
                # p's tombstone also keeps the anti-payload
                self._defer_free(anti.ref, op - 1)
                self._free_now(p.ref)
            else:
                self._defer_free(anti.ref, op + 1)
                self._defer_free(p.ref, op)
            p.anti = None
        self.rt._yield("op")

    def epoch_verified_cas(self, cell: VersionedCell, expected: tuple, desired) -> bool:
        """CAS that linearizes in this operation's epoch, or raises EpochAdvanced."""
        self.check_epoch()
        counter = cell.compare_and_swap(expected, desired)
        if counter is None:
            return False
        if self.rt.audit is not None:
            self.rt.audit.cas(cell, counter, self.op_epoch)
        return True


# -- runtime --------------------------------------------------------------

class EpochRuntime:
    """Shared persistence runtime over one heap."""

    def __init__(self, heap: Heap, strategy=None, advancer: AdvancerConfig | None = None,
                 audit=None, mutation: str | None = None):
        if mutation is not None and mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {mutation!r}")
        self.heap = heap
        self.strategy = strategy if strategy is not None else PerEpoch()
        self.advancer = advancer if advancer is not None else AdvancerConfig.manual()
        self.audit = audit
        self.mutation = mutation
        self.tracker = OperationTracker()
        self._epoch = heap.read_clock()
        self.start_epoch = self._epoch
        self._contexts: list[ThreadContext] = []
        self._ctx_lock = threading.Lock()
        self._local = threading.local()
        self._advance_lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._yield_hook = None
        self.advances = 0
        self.advance_error: BaseException | None = None
        if audit is not None:
            audit.attach(self)

    @property
    def epoch(self) -> int:
        return self._epoch

    def set_yield_hook(self, fn) -> None:
        self._yield_hook = fn

    def _yield(self, site: str) -> None:
        hook = self._yield_hook
        if hook is not None:
            hook(site)

    # -- contexts -----------------------------------------------------
    def new_context(self) -> ThreadContext:
        with self._ctx_lock:
            ctx = ThreadContext(self, len(self._contexts))
            self._contexts.append(ctx)
        return ctx

    def context(self) -> ThreadContext:
        """This thread's context, created on first use."""
        ctx = getattr(self._local, "ctx", None)
        if ctx is None:
            ctx = self._local.ctx = self.new_context()
        return ctx

    @property
    def contexts(self) -> list[ThreadContext]:
        return list(self._contexts)

    # -- epoch advance --------------------------------------------------
    def advance_epoch(self) -> None:
        with self._advance_lock:
            heap = self.heap
            e = self._epoch
            self.tracker.wait_all(e - 1, self._pause_hook())
            if self.audit is not None:
                self.audit.advance_begin(e)

            # write back everything labeled e-1 (and any stragglers still buffered)
            seen = set()
            for ctx in self.contexts:
                with ctx.lock:
                    refs = ctx.to_be_persisted[(e - 1) % 4]
                    ctx.to_be_persisted[(e - 1) % 4] = []
                    ctx.buffered -= len(refs)
                for r in refs:
                    if r.offset not in seen:
                        seen.add(r.offset)
                        heap.write_back_ref(r)
            self._yield("advance:writeback")
            if self.mutation != "skip_fence":
                heap.fence()
            self._yield("advance:fence")

            # reclaim blocks deleted in e-2; tombstones become durable at the
            # next fence, which is also when the allocator may reuse them
            slot = (e - 1) % 4 if self.mutation == "wrong_free_slot" else (e - 2) % 4
            for ctx in self.contexts:
                with ctx.lock:
                    refs = ctx.to_be_freed[slot]
                    ctx.to_be_freed[slot] = []
                for r in refs:
                    if self.audit is not None:
                        self.audit.scrub(r, e)
                    heap.free_block(r)
            heap.write_back_tombstones()
            self._yield("advance:reclaim")

            self._epoch = e + 1
            heap.store_clock(e + 1)
            if self.audit is not None:
                self.audit.clock_store(e + 1)
            heap.write_back_clock()
            self.advances += 1
            if self.audit is not None:
                self.audit.advance_end(e)
            self._yield("advance:clock")

    def _pause_hook(self):
        hook = self._yield_hook
        if hook is None:
            return None
        return lambda: hook("wait_all")

    def sync(self) -> None:
        """Make every completed operation durable (orderly shutdown)."""
        self.advance_epoch()
        self.advance_epoch()
        self.heap.fence()

    # -- background advancer --------------------------------------------
    def start(self) -> EpochRuntime:
        if self._thread is not None:
            raise RuntimeStateError("runtime already started")
        if self.advancer.mode == "manual":
            self._thread = False
            return self
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="epoch-advancer", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.wait(self.advancer.interval):
            try:
                self.advance_epoch()
            except BaseException as exc:
                log.exception("epoch advance failed")
                self.advance_error = exc
                return

    def stop(self) -> None:
        t = self._thread
        if t is None:
            raise RuntimeStateError("runtime not started")
        self._stop.set()
        if t:
            t.join()
        self._thread = None

    @property
    def running(self) -> bool:
        return bool(self._thread)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
