"""Hash map with one lock per bucket; each key/value pair is one payload."""

from __future__ import annotations

import threading
from bisect import bisect_left

from ..errors import OldSeeNewException
from ..payload import BytesField, PayloadLayout
from .base import LoggedStructure, keep_newer, run_partitioned

MAP_TAG = 2
KEY_BYTES = 32
DEFAULT_BUCKETS = 1 << 20

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def map_layout(value_bytes: int = 1024) -> PayloadLayout:
    return PayloadLayout("map_pair", MAP_TAG,
                         [BytesField("key", KEY_BYTES), BytesField("value", value_bytes)])


class _Bucket:
    """Sorted list of keys with their payload handles."""

    __slots__ = ("keys", "handles")

    def __init__(self):
        self.keys: list[bytes] = []
        self.handles: list = []

    def find(self, key):
        i = bisect_left(self.keys, key)
        return i, i < len(self.keys) and self.keys[i] == key


class PersistentHashMap(LoggedStructure):

    def __init__(self, rt, buckets: int = DEFAULT_BUCKETS, value_bytes: int = 1024, log=None):
        super().__init__(rt, log)
        if buckets < 1:
            raise ValueError("bucket count must be >= 1")
        self.nbuckets = buckets
        self.layout = map_layout(value_bytes)
        self.layouts = (self.layout,)
        # buckets and their locks are materialized on first use
        self._buckets: dict[int, _Bucket] = {}
        self._locks: dict[int, threading.Lock] = {}

    def bucket_of(self, key: bytes) -> int:
        return fnv1a(key) % self.nbuckets

    def _slot(self, key):
        b = self.bucket_of(key)
        lock = self._locks.get(b)
        if lock is None:
            lock = self._locks.setdefault(b, threading.Lock())
        return b, lock

    def _bucket(self, b) -> _Bucket:
        bk = self._buckets.get(b)
        if bk is None:
            bk = self._buckets[b] = _Bucket()
        return bk

    def put(self, key: bytes, value: bytes) -> bytes | None:
        """Insert or overwrite; returns the previous value."""
        key = bytes(key)
        ctx = self._ctx()
        new = ctx.pnew(self.layout, key=key, value=value)
        b, lock = self._slot(key)
        with lock:
            with ctx.operation(new):
                bk = self._bucket(b)
                i, found = bk.find(key)
                if found:
                    old = bk.handles[i]
                    try:
                        prev = ctx.get(old, "value")
                    except OldSeeNewException as exc:
                        self._unreachable(exc)
                    try:
                        bk.handles[i] = ctx.set(old, "value", value)
                    finally:
                        # same-epoch ALLOC: freed at once, even if the clone failed
                        ctx.pdelete(new)
                else:
                    bk.keys.insert(i, key)
                    bk.handles.insert(i, new)
                    prev = None
                self._record(b, "put", (key, bytes(value)), prev, ctx.op_epoch)
        return prev

    def insert(self, key: bytes, value: bytes) -> bool:
        """Insert if absent; False (and no change) if the key exists."""
        key = bytes(key)
        ctx = self._ctx()
        new = ctx.pnew(self.layout, key=key, value=value)
        b, lock = self._slot(key)
        with lock:
            with ctx.operation(new):
                bk = self._bucket(b)
                i, found = bk.find(key)
                if found:
                    ctx.pdelete(new)
                else:
                    bk.keys.insert(i, key)
                    bk.handles.insert(i, new)
                self._record(b, "insert", (key, bytes(value)), not found, ctx.op_epoch)
        return not found

    def remove(self, key: bytes) -> bytes | None:
        key = bytes(key)
        ctx = self._ctx()
        b, lock = self._slot(key)
        with lock:
            with ctx.operation():
                bk = self._bucket(b)
                i, found = bk.find(key)
                prev = None
                if found:
                    h = bk.handles[i]
                    try:
                        prev = ctx.get(h, "value")
                    except OldSeeNewException as exc:
                        self._unreachable(exc)
                    ctx.pdelete(h)
                    del bk.keys[i], bk.handles[i]
                self._record(b, "remove", (key,), prev, ctx.op_epoch)
        return prev

    def get(self, key: bytes) -> bytes | None:
        """Read-only lookup; runs outside any operation."""
        key = bytes(key)
        ctx = self._ctx()
        b, lock = self._slot(key)
        with lock:
            bk = self._buckets.get(b)
            if bk is None:
                return None
            i, found = bk.find(key)
            return ctx.get(bk.handles[i], "value") if found else None

    def handle_of(self, key: bytes):
        b, lock = self._slot(bytes(key))
        with lock:
            bk = self._buckets.get(b)
            if bk is None:
                return None
            i, found = bk.find(bytes(key))
            return bk.handles[i] if found else None

    def __len__(self):
        return sum(len(bk.keys) for bk in list(self._buckets.values()))

    def snapshot(self) -> dict[bytes, bytes]:
        ctx = self._ctx()
        out = {}
        for b in sorted(self._buckets):
            with self._locks[b]:
                bk = self._buckets[b]
                for key, h in zip(bk.keys, bk.handles):
                    out[key] = ctx.get_unsafe(h, "value")
        return out

    @classmethod
    def recover(cls, rt, rs, k: int = 1, buckets: int = DEFAULT_BUCKETS, value_bytes: int = 1024,
                log=None) -> PersistentHashMap:
        """Re-insert every surviving pair; k threads share the per-bucket locks."""
        m = cls(rt, buckets, value_bytes, log)
        layout = m.layout
        key_field, key_off = layout.field("key")
        losers = []

        def insert_all(_, it):
            for s in it:
                if s.payload[:4] != layout.tag_bytes:
                    m.recovery_issues.append(f"foreign payload at offset {s.ref.offset}")
                    continue
                key = key_field.decode(s.payload, key_off)
                h = m._handle(s, layout)
                b, lock = m._slot(key)
                with lock:
                    bk = m._bucket(b)
                    i, found = bk.find(key)
                    if found:
                        win, lose = keep_newer(bk.handles[i], h)
                        bk.handles[i] = win
                        losers.append(lose)
                        m.recovery_issues.append(f"duplicate map key {key!r}")
                    else:
                        bk.keys.insert(i, key)
                        bk.handles.insert(i, h)

        run_partitioned(rs, k, insert_all)
        m._discard(losers)
        return m
