"""Slab allocator with per-thread caches over the fixed heap layout.

Metadata is entirely transient; the only persistent trace of an
allocation is the block header written by the runtime.
"""

from __future__ import annotations

import itertools
import threading
from collections import deque

from ..errors import DoubleFree, OutOfMemory
from .layout import BlockRef, HeapLayout

BATCH = 32


class _Cache:
    __slots__ = ("lock", "lists")

    def __init__(self, n_classes):
        self.lock = threading.Lock()
        self.lists = [[] for _ in range(n_classes)]


class SlabAllocator:

    def __init__(self, layout: HeapLayout, live: set[int] | None = None, batch: int = BATCH):
        self.layout = layout
        self.batch = batch
        n = len(layout.geometry.size_classes)
        self._class_bytes = layout.geometry.size_classes
        self._global = [deque() for _ in range(n)]
        self._glock = threading.Lock()
        self._caches: list[_Cache] = []
        self._local = threading.local()
        self._allocated: set[int] = set(live or ())
        self._alock = threading.Lock()
        self.capacity = [0] * n
        for s in layout.slabs:
            self.capacity[s.class_index] += s.nblocks
        # never-used blocks are handed out lazily in address order
        self._live_at_attach = frozenset(self._allocated)
        self._fresh = [self._unused(ci) for ci in range(n)]

    def _unused(self, ci: int):
        live = self._live_at_attach
        for o in self.layout.block_offsets(ci):
            if o not in live:
                yield o

    def _cache(self) -> _Cache:
        c = getattr(self._local, "cache", None)
        if c is None:
            c = self._local.cache = _Cache(len(self._global))
            with self._glock:
                self._caches.append(c)
        return c

    def alloc(self, class_index: int) -> BlockRef:
        cache = self._cache()
        with cache.lock:
            lst = cache.lists[class_index]
            if not lst:
                self._refill(class_index, lst)
            # refill hands out ascending offsets; pop from the front end
            off = lst.pop()
        with self._alock:
            self._allocated.add(off)
        return BlockRef(off, self._class_bytes[class_index])

    def _refill(self, ci: int, lst: list) -> None:
        with self._glock:
            g = self._global[ci]
            take = [g.popleft() for _ in range(min(self.batch, len(g)))]
            if len(take) < self.batch:
                take += itertools.islice(self._fresh[ci], self.batch - len(take))
            if not take:
                self._rebalance(ci)
                take = [g.popleft() for _ in range(min(self.batch, len(g)))]
        if not take:
            raise OutOfMemory(f"size class {self._class_bytes[ci]} exhausted")
        lst.extend(reversed(take))

    def _rebalance(self, ci: int) -> None:
        # caller holds _glock; steal idle blocks from every other thread cache
        me = self._cache()
        for c in self._caches:
            if c is me or not c.lists[ci]:
                continue
            # a busy cache may be waiting on _glock itself; skip it
            if not c.lock.acquire(blocking=False):
                continue
            try:
                self._global[ci].extend(reversed(c.lists[ci]))
                c.lists[ci].clear()
            finally:
                c.lock.release()

    def release(self, ref: BlockRef) -> None:
        """Return a block whose tombstone is durable to the global free list."""
        ci = self._class_bytes.index(ref.len)
        with self._glock:
            self._global[ci].append(ref.offset)

    def mark_free(self, ref: BlockRef) -> None:
        with self._alock:
            if ref.offset not in self._allocated:
                raise DoubleFree(f"block at {ref.offset} is not allocated")
            self._allocated.discard(ref.offset)

    def is_allocated(self, offset: int) -> bool:
        return offset in self._allocated

    @property
    def allocated_count(self) -> int:
        return len(self._allocated)
