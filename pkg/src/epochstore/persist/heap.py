from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import BadSuperblock, OversizeAllocation, UnsupportedOperation
from .allocator import SlabAllocator
from .backends import MappedFileBackend, SimBackend
from .layout import (HEADER_MAGIC, INITIAL_EPOCH, SCRUBBED_HEADER, U64, BlkType, BlockRef,
                     HeapGeometry, HeapLayout, PayloadHeader)

_HDR_DTYPE = np.dtype([("magic", "<u4"), ("blk_type", "u1"), ("size_class", "u1"),
                       ("pad", "<u2"), ("epoch", "<u8"), ("uid", "<u8"),
                       ("payload_len", "<u4"), ("pad2", "<u4")])


def scan_arrays(buf, layout: HeapLayout) -> dict[str, np.ndarray]:
    """Column arrays (address order) describing every block whose header is live."""
    cols = {k: [] for k in ("offset", "block_bytes", "slab_class", "blk_type", "size_class",
                            "epoch", "uid", "payload_len")}
    for s in layout.slabs:
        if not s.nblocks:
            continue
        hdrs = np.ndarray((s.nblocks,), dtype=_HDR_DTYPE, buffer=buf, offset=s.start,
                          strides=(s.block_bytes,))
        live = (hdrs["magic"] == HEADER_MAGIC) & (hdrs["blk_type"] >= 1) & (hdrs["blk_type"] <= 3)
        idx = np.nonzero(live)[0]
        sel = hdrs[idx]
        cols["offset"].append(s.start + idx.astype(np.int64) * s.block_bytes)
        cols["block_bytes"].append(np.full(len(idx), s.block_bytes, np.int64))
        cols["slab_class"].append(np.full(len(idx), s.class_index, np.int64))
        for k in ("blk_type", "size_class", "epoch", "uid", "payload_len"):
            cols[k].append(sel[k].copy())
        del hdrs, live, sel
    out = {}
    for k, parts in cols.items():
        dt = np.uint64 if k in ("epoch", "uid") else np.int64
        out[k] = np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
    return out


def scan_headers(buf, layout: HeapLayout) -> list[tuple[BlockRef, PayloadHeader]]:
    """Every block with a live header, in address order."""
    a = scan_arrays(buf, layout)
    rows = zip(a["offset"].tolist(), a["block_bytes"].tolist(), a["blk_type"].tolist(),
               a["size_class"].tolist(), a["epoch"].tolist(), a["uid"].tolist(),
               a["payload_len"].tolist())
    return [(BlockRef(off, n), PayloadHeader(BlkType(t), epoch, uid, plen, sc))
            for off, n, t, sc, epoch, uid, plen in rows]


@dataclass
class HeapImage:
    """Immutable byte image of a heap (e.g. a sampled crash state)."""

    data: bytes

    @cached_property
    def layout(self) -> HeapLayout:
        return HeapLayout.parse(self.data)

    @property
    def crash_epoch(self) -> int:
        return U64.unpack_from(self.data, self.layout.clock_offset)[0]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.data)


def iterate_blocks(source):
    """Yield ``(BlockRef, PayloadHeader)`` for every live block of a heap or image."""
    if isinstance(source, Heap):
        yield from source.iterate_blocks()
    else:
        yield from scan_headers(source.data, source.layout)


@dataclass
class _Deferred:
    items: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class Heap:
    """A persistent heap of fixed-layout payload blocks over one backend."""

    def __init__(self, backend, layout: HeapLayout, live: set[int] | None = None):
        self.backend = backend
        self.layout = layout
        self.geometry = layout.geometry
        self.line = layout.geometry.line_bytes
        self.allocator = SlabAllocator(layout, live)
        self._deferred = _Deferred()
        self._tombstones: list[BlockRef] = []
        self._uid_lock = threading.Lock()
        backend.on_fence.append(self._release_deferred)

    # -- construction --------------------------------------------------
    @classmethod
    def create(cls, path, geometry: HeapGeometry, backend: str = "file", **sim_opts) -> Heap:
        geometry.validate()
        layout = HeapLayout.compute(geometry)
        if backend == "file":
            if path is None:
                raise ValueError("file backend needs a path")
            be = MappedFileBackend(path, geometry.total_bytes)
        elif backend == "sim":
            be = SimBackend(geometry.total_bytes, **sim_opts)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        heap = cls(be, layout)
        heap.write(0, layout.superblock())
        heap.write(layout.clock_offset, U64.pack(INITIAL_EPOCH))
        heap.write(layout.uid_offset, U64.pack(1))
        heap.write(layout.dir_offset, layout.directory())
        heap.write_back(0, layout.data_offset)
        heap.fence()
        if backend == "sim" and path is not None:
            heap.save(path)
        return heap

    @classmethod
    def open(cls, path) -> tuple[Heap, int]:
        size = os.path.getsize(path)
        if size < 64:
            raise BadSuperblock(f"{path}: file too short ({size} bytes)")
        be = MappedFileBackend(path)
        try:
            layout = HeapLayout.parse(be.view())
        except BadSuperblock:
            be.close()
            raise
        return cls._attach(be, layout)

    @classmethod
    def from_image(cls, image: HeapImage | bytes, **sim_opts) -> tuple[Heap, int]:
        data = image.data if isinstance(image, HeapImage) else bytes(image)
        layout = HeapLayout.parse(data)
        return cls._attach(SimBackend(image=data, **sim_opts), layout)

    @classmethod
    def _attach(cls, be, layout) -> tuple[Heap, int]:
        live = set(scan_arrays(be.view(), layout)["offset"].tolist())
        heap = cls(be, layout, live)
        return heap, heap.read_clock()

    # -- raw access ----------------------------------------------------
    def read(self, offset: int, length: int) -> bytes:
        return self.backend.read(offset, length)

    def write(self, offset: int, data) -> None:
        self.backend.write(offset, data)

    def write_back(self, offset: int, length: int) -> None:
        self.backend.write_back(offset, length)

    def write_back_ref(self, ref: BlockRef) -> None:
        self.backend.write_back(ref.offset, ref.len)

    def fence(self) -> None:
        self.backend.fence()

    @property
    def counters(self):
        return self.backend.counters

    # -- clock and uid counter ----------------------------------------
    def read_clock(self) -> int:
        return U64.unpack(self.read(self.layout.clock_offset, 8))[0]

    def store_clock(self, epoch: int) -> None:
        self.write(self.layout.clock_offset, U64.pack(epoch))

    def write_back_clock(self) -> None:
        self.write_back(self.layout.clock_offset, self.line)

    def read_uid_counter(self) -> int:
        return U64.unpack(self.read(self.layout.uid_offset, 8))[0]

    def reserve_uids(self, n: int) -> range:
        """Reserve ``n`` fresh uids; the bump is written back, durable at the next fence."""
        with self._uid_lock:
            start = self.read_uid_counter()
            self.write(self.layout.uid_offset, U64.pack(start + n))
            self.write_back(self.layout.uid_offset, self.line)
        return range(start, start + n)

    def bump_uid_counter(self, floor: int) -> None:
        with self._uid_lock:
            if self.read_uid_counter() < floor:
                self.write(self.layout.uid_offset, U64.pack(floor))
                self.write_back(self.layout.uid_offset, self.line)

    # -- blocks --------------------------------------------------------
    def alloc_block(self, payload_len: int) -> BlockRef:
        """Smallest-fit block; the header is left for the caller to write."""
        ci = self.layout.class_for(payload_len)
        if ci is None:
            raise OversizeAllocation(
                f"{payload_len} payload bytes + header exceed largest class "
                f"{self.geometry.size_classes[-1]}")
        return self.allocator.alloc(ci)

    def write_header(self, ref: BlockRef, blk_type: BlkType, epoch: int, uid: int,
                     payload_len: int) -> None:
        ci = self.geometry.size_classes.index(ref.len)
        self.write(ref.offset, PayloadHeader(blk_type, epoch, uid, payload_len, ci).pack())

    def read_header(self, ref: BlockRef) -> PayloadHeader | None:
        return PayloadHeader.unpack(self.read(ref.offset, 32))

    def free_block(self, ref: BlockRef) -> None:
        """Tombstone a block in cache.

        The block becomes reusable only after ``write_back_tombstones`` and
        a subsequent fence have made the scrubbed header durable.
        """
        self.allocator.mark_free(ref)
        with self.backend.lock:
            self.backend.write(ref.offset, SCRUBBED_HEADER)
        with self._deferred.lock:
            self._tombstones.append(ref)

    def write_back_tombstones(self) -> int:
        """Write back every scrubbed header not yet written back; returns the count."""
        with self._deferred.lock:
            refs, self._tombstones = self._tombstones, []
        be = self.backend
        with be.lock:
            for ref in refs:
                be.write_back(ref.offset, self.line)
            ticket = be.counters.fences
        with self._deferred.lock:
            self._deferred.items.extend((ticket, r) for r in refs)
        return len(refs)

    def _release_deferred(self) -> None:
        now = self.backend.counters.fences
        with self._deferred.lock:
            keep = []
            for ticket, ref in self._deferred.items:
                if ticket < now:
                    self.allocator.release(ref)
                else:
                    keep.append((ticket, ref))
            self._deferred.items = keep

    def iterate_blocks(self):
        with self.backend.lock:
            found = scan_headers(self.backend.view(), self.layout)
        return iter(found)

    # -- crash simulation ----------------------------------------------
    def crash_image(self, seed: int) -> HeapImage:
        if not isinstance(self.backend, SimBackend):
            raise UnsupportedOperation("crash images require the simulator backend")
        return HeapImage(self.backend.crash_image(seed))

    def persistent_image(self) -> HeapImage:
        if not isinstance(self.backend, SimBackend):
            raise UnsupportedOperation("persistent image requires the simulator backend")
        with self.backend.lock:
            return HeapImage(bytes(self.backend.persistent))

    def save(self, path) -> None:
        """Write the durable image of a simulated heap to ``path``."""
        self.persistent_image().save(path)

    def close(self) -> None:
        self.backend.close()
