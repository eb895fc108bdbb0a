from __future__ import annotations

import threading
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class OpLogEntry:
    seq: int            # global linearization order, drawn under the structure lock
    tid: int
    domain: object      # contention domain (queue, bucket number, vertex)
    kind: str
    args: tuple
    result: object
    epoch: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["domain"] = repr(self.domain)
        d["args"] = [a.hex() if isinstance(a, bytes) else a for a in self.args]
        d["result"] = self.result.hex() if isinstance(self.result, bytes) else self.result
        return d


class OpLog:
    """Append-only record of linearized mutating operations."""

    def __init__(self):
        self.entries: list[OpLogEntry] = []
        self._lock = threading.Lock()

    def record(self, seq, tid, domain, kind, args, result, epoch) -> None:
        e = OpLogEntry(seq, tid, domain, kind, tuple(args), result, epoch)
        with self._lock:
            self.entries.append(e)

    def __len__(self):
        return len(self.entries)

    def snapshot(self) -> list[OpLogEntry]:
        with self._lock:
            return list(self.entries)
