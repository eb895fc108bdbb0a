"""FIFO queue under one global lock; each item is a payload labeled with its index."""

from __future__ import annotations

import threading
from collections import deque

from ..errors import OldSeeNewException
from ..payload import BytesField, PayloadLayout, U64Field
from .base import LoggedStructure, keep_newer, run_partitioned

QUEUE_TAG = 1


def queue_layout(value_bytes: int = 1024) -> PayloadLayout:
    return PayloadLayout("queue_item", QUEUE_TAG, [U64Field("index"), BytesField("value", value_bytes)])


class PersistentQueue(LoggedStructure):

    def __init__(self, rt, value_bytes: int = 1024, log=None):
        super().__init__(rt, log)
        self.layout = queue_layout(value_bytes)
        self.layouts = (self.layout,)
        self._lock = threading.Lock()
        self._items: deque = deque()
        self._tail = 0      # index of the last enqueued item

    def enqueue(self, value: bytes) -> None:
        ctx = self._ctx()
        with self._lock:
            with ctx.operation():
                idx = self._tail + 1
                p = ctx.pnew(self.layout, index=idx, value=value)
                self._items.append(p)
                self._tail = idx
                self._record("queue", "enqueue", (bytes(value),), None, ctx.op_epoch)

    def dequeue(self) -> bytes | None:
        ctx = self._ctx()
        with self._lock:
            with ctx.operation():
                if not self._items:
                    self._record("queue", "dequeue", (), None, ctx.op_epoch)
                    return None
                p = self._items[0]
                try:
                    value = ctx.get(p, "value")
                except OldSeeNewException as exc:
                    self._unreachable(exc)
                ctx.pdelete(p)
                self._items.popleft()
                self._record("queue", "dequeue", (), value, ctx.op_epoch)
                return value

    def __len__(self):
        return len(self._items)

    def indices(self) -> list[int]:
        with self._lock:
            return [self.rt.context().get_unsafe(p, "index") for p in self._items]

    def snapshot(self) -> list[bytes]:
        ctx = self._ctx()
        with self._lock:
            return [ctx.get_unsafe(p, "value") for p in self._items]

    @classmethod
    def recover(cls, rt, rs, k: int = 1, value_bytes: int = 1024, log=None) -> PersistentQueue:
        """Rebuild from survivors: items ordered by their index labels."""
        q = cls(rt, value_bytes, log)

        def collect(_, it):
            found = []
            for s in it:
                lay = q._layout_of(s)
                if lay is not None:
                    found.append((lay.decode(s.payload)["index"], q._handle(s, lay)))
            return found

        by_index = {}
        losers = []
        for part in run_partitioned(rs, k, collect):
            for idx, h in part:
                if idx in by_index:
                    win, lose = keep_newer(by_index[idx], h)
                    by_index[idx] = win
                    losers.append(lose)
                    q.recovery_issues.append(f"duplicate queue index {idx}")
                else:
                    by_index[idx] = h
        order = sorted(by_index)
        if order and order[-1] - order[0] + 1 != len(order):
            q.recovery_issues.append(f"queue indices not contiguous: {order[0]}..{order[-1]}")
        q._items.extend(by_index[i] for i in order)
        q._tail = order[-1] if order else 0
        q._discard(losers)
        return q
