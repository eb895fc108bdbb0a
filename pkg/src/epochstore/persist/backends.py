"""Persistence backends.

Both backends expose the same primitive surface: ``write`` into the
volatile view, ``write_back`` of a byte range, and a global ``fence``.
:class:`SimBackend` models a write-back cache in front of a persistence
domain at line granularity and can produce crash images; :class:`MappedFileBackend`
maps a real file and uses ``msync`` as its fence.
"""

from __future__ import annotations

import itertools
import mmap
import os
import random
import threading
from dataclasses import dataclass

from ..errors import UnsupportedOperation
from .layout import LINE_BYTES


@dataclass
class BackendCounters:
    writes_back: int = 0
    fences: int = 0
    lines_flushed: int = 0

    def snapshot(self) -> BackendCounters:
        return BackendCounters(self.writes_back, self.fences, self.lines_flushed)

    def __sub__(self, other: BackendCounters) -> BackendCounters:
        return BackendCounters(self.writes_back - other.writes_back,
                               self.fences - other.fences,
                               self.lines_flushed - other.lines_flushed)


def _lines(offset: int, length: int, line: int = LINE_BYTES) -> range:
    if length <= 0:
        return range(0)
    return range(offset // line, (offset + length - 1) // line + 1)


class SimBackend:
    """Cache-line write-back simulator.

    Each line is clean, dirty (cache newer than anything scheduled), or
    pending (a write-back captured a snapshot that the next fence will
    persist).  A line can be both dirty and pending when it is rewritten
    after its write-back.  Crash images overlay, per line, any version the
    hardware could have made durable: the persistent copy, the pending
    snapshot or the current cache contents.

    ``eviction_rate`` > 0 spontaneously evicts a random dirty line on some
    writes, so intermediate values can reach the persistence domain.
    ``evict_on_write_back`` models clwb-style invalidation as an extra
    counter only (it never changes what is durable).
    """

    kind = "sim"

    def __init__(self, size: int | None = None, *, image: bytes | None = None,
                 line_bytes: int = LINE_BYTES, eviction_rate: float = 0.0,
                 evict_on_write_back: bool = False, seed: int = 0, track: bool = False):
        if image is not None:
            size = len(image)
        if size is None or size % line_bytes:
            raise ValueError("size must be a multiple of the line size")
        self.size = size
        self.line = line_bytes
        self.cache = bytearray(image) if image is not None else bytearray(size)
        self.persistent = bytearray(self.cache)
        self.lock = threading.RLock()
        self.counters = BackendCounters()
        self._dirty: set[int] = set()
        self._pending: dict[int, tuple[bytes, int]] = {}
        self.eviction_rate = eviction_rate
        self.evict_on_write_back = evict_on_write_back
        self.evictions = 0
        self.invalidations = 0
        self._rng = random.Random(seed)
        # per-line write sequence numbers, for persist-order audits
        self.track = track
        self._seq = 0
        self._last_seq: dict[int, int] = {}
        self._durable_seq: dict[int, int] = {}
        self.on_fence = []

    # -- volatile view -------------------------------------------------
    def read(self, offset: int, length: int) -> bytes:
        return bytes(self.cache[offset:offset + length])

    def view(self):
        return self.cache

    def write(self, offset: int, data) -> None:
        n = len(data)
        if offset < 0 or offset + n > self.size:
            raise IndexError(f"write [{offset}, {offset + n}) outside heap")
        with self.lock:
            self.cache[offset:offset + n] = data
            lines = _lines(offset, n, self.line)
            self._dirty.update(lines)
            if self.track:
                self._seq += 1
                for ln in lines:
                    self._last_seq[ln] = self._seq
            if self.eviction_rate and self._rng.random() < self.eviction_rate:
                self._evict(self._rng.choice(tuple(self._dirty)))

    def _evict(self, ln: int) -> None:
        a = ln * self.line
        self.persistent[a:a + self.line] = self.cache[a:a + self.line]
        self._dirty.discard(ln)
        self._pending.pop(ln, None)
        self.evictions += 1
        if self.track:
            self._durable_seq[ln] = self._last_seq.get(ln, 0)

    # -- persistence primitives ---------------------------------------
    def write_back(self, offset: int, length: int) -> None:
        with self.lock:
            lines = _lines(offset, length, self.line)
            self.counters.writes_back += 1
            self.counters.lines_flushed += len(lines)
            for ln in lines:
                if ln in self._dirty:
                    self._dirty.discard(ln)
                    a = ln * self.line
                    self._pending[ln] = (bytes(self.cache[a:a + self.line]),
                                         self._last_seq.get(ln, 0))
            if self.evict_on_write_back:
                self.invalidations += len(lines)

    def fence(self) -> None:
        with self.lock:
            for ln, (snap, seq) in self._pending.items():
                a = ln * self.line
                self.persistent[a:a + self.line] = snap
                if self.track:
                    self._durable_seq[ln] = seq
            self._pending.clear()
            self.counters.fences += 1
            for cb in self.on_fence:
                cb()

    def flush_all(self) -> None:
        """Write back every dirty line and fence (orderly shutdown)."""
        with self.lock:
            for ln in sorted(self._dirty):
                self.write_back(ln * self.line, self.line)
            self.fence()

    # -- inspection ----------------------------------------------------
    def line_state(self, ln: int) -> str:
        with self.lock:
            if ln in self._pending:
                return "pending"
            return "dirty" if ln in self._dirty else "clean"

    def unpersisted_lines(self) -> list[int]:
        with self.lock:
            return sorted(self._dirty | self._pending.keys())

    def line_seq(self, ln: int) -> int:
        return self._last_seq.get(ln, 0)

    def durable_seq(self, ln: int) -> int:
        return self._durable_seq.get(ln, 0)

    def _versions(self, ln: int) -> list[bytes]:
        a = ln * self.line
        out = []
        if ln in self._pending:
            out.append(self._pending[ln][0])
        if ln in self._dirty:
            out.append(bytes(self.cache[a:a + self.line]))
        return out

    def crash_image(self, seed: int) -> bytes:
        """Sample a post-crash persistent image.

        Each unpersisted line independently keeps its durable contents or
        is replaced by one of its in-flight versions.  The simulator itself
        is left untouched.
        """
        rng = random.Random(seed)
        with self.lock:
            img = bytearray(self.persistent)
            for ln in sorted(self._dirty | self._pending.keys()):
                choices = self._versions(ln)
                pick = rng.randrange(len(choices) + 1)
                if pick:
                    a = ln * self.line
                    img[a:a + self.line] = choices[pick - 1]
            return bytes(img)

    def enumerate_crash_images(self, limit: int = 12):
        """Yield every distinct crash image (only for <= ``limit`` unpersisted lines)."""
        with self.lock:
            lines = sorted(self._dirty | self._pending.keys())
            if len(lines) > limit:
                raise ValueError(f"{len(lines)} unpersisted lines exceed enumeration limit {limit}")
            base = bytes(self.persistent)
            options = [[None] + self._versions(ln) for ln in lines]
        for combo in itertools.product(*options):
            img = bytearray(base)
            for ln, v in zip(lines, combo):
                if v is not None:
                    img[ln * self.line:(ln + 1) * self.line] = v
            yield bytes(img)

    def close(self) -> None:
        pass


class MappedFileBackend:
    """Real backend over a memory-mapped file.

    Range write-backs are only recorded; ``fence`` issues an msync of the
    whole mapping.  Durability is claimed only after a fence.
    """

    kind = "file"

    def __init__(self, path, size: int | None = None, line_bytes: int = LINE_BYTES):
        self.path = os.fspath(path)
        if size is not None:
            with open(self.path, "wb") as f:
                f.truncate(size)
        self._fd = os.open(self.path, os.O_RDWR)
        self.size = os.fstat(self._fd).st_size
        self.line = line_bytes
        self._mm = mmap.mmap(self._fd, self.size) if self.size else None
        self.lock = threading.RLock()
        self.counters = BackendCounters()
        self.on_fence = []
        self.track = False

    def read(self, offset: int, length: int) -> bytes:
        return self._mm[offset:offset + length]

    def view(self):
        return self._mm

    def write(self, offset: int, data) -> None:
        n = len(data)
        if offset < 0 or offset + n > self.size:
            raise IndexError(f"write [{offset}, {offset + n}) outside heap")
        with self.lock:
            self._mm[offset:offset + n] = data

    def write_back(self, offset: int, length: int) -> None:
        with self.lock:
            self.counters.writes_back += 1
            self.counters.lines_flushed += len(_lines(offset, length, self.line))

    def fence(self) -> None:
        with self.lock:
            self._mm.flush()
            self.counters.fences += 1
            for cb in self.on_fence:
                cb()

    def flush_all(self) -> None:
        self.fence()

    def crash_image(self, seed: int) -> bytes:
        raise UnsupportedOperation("crash images require the simulator backend")

    def close(self) -> None:
        if self._mm is not None:
            self._mm.flush()
            self._mm.close()
            self._mm = None
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
