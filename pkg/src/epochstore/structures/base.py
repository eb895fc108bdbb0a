from __future__ import annotations

import itertools
import threading

from ..errors import OldSeeNewException
from ..payload import PayloadHandle, PayloadLayout, payload_tag
from ..recovery import RecoveredSet, Survivor

# one global sequence for linearization order; drawn while holding the
# structure lock(s), so it agrees with every contention domain's order
_SEQ = itertools.count(1)


class LoggedStructure:
    """Shared plumbing: runtime access, op logging and recovery helpers."""

    layouts: tuple[PayloadLayout, ...] = ()

    def __init__(self, rt, log=None):
        self.rt = rt
        self.log = log
        self.recovery_issues: list[str] = []

    def _record(self, domain, kind, args, result, epoch):
        if self.log is not None:
            self.log.record(next(_SEQ), threading.get_ident(), domain, kind, args, result, epoch)

    def _ctx(self):
        return self.rt.context()

    @staticmethod
    def _unreachable(exc: OldSeeNewException):
        raise AssertionError(f"old-see-new under the structure lock: {exc}") from exc

    # -- recovery helpers --------------------------------------------
    def _layout_of(self, s: Survivor) -> PayloadLayout | None:
        tag = payload_tag(s.payload)
        for lay in self.layouts:
            if lay.tag == tag:
                return lay
        self.recovery_issues.append(f"unknown payload tag {tag} at offset {s.ref.offset}")
        return None

    def _handle(self, s: Survivor, layout: PayloadLayout) -> PayloadHandle:
        return PayloadHandle(s.ref, layout, s.header.blk_type, s.epoch, s.uid)

    def _discard(self, handles) -> None:
        """Delete recovered payloads that the rebuilt structure does not reference."""
        handles = list(handles)
        if not handles or self.rt is None:
            return
        ctx = self._ctx()
        with ctx.operation():
            for h in handles:
                ctx.pdelete(h)


def run_partitioned(rs: RecoveredSet, k: int, fn) -> list:
    """Call ``fn(i, iterator)`` for each of k iterators, on k threads when k > 1."""
    its = rs.iterators(k)
    if k == 1:
        return [fn(0, its[0])]
    results = [None] * k
    errors = []

    def work(i):
        try:
            results[i] = fn(i, its[i])
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(k)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def keep_newer(a: PayloadHandle, b: PayloadHandle) -> tuple[PayloadHandle, PayloadHandle]:
    """(winner, loser) among two payloads claiming the same abstract slot."""
    if (b.epoch, b.ref.offset) > (a.epoch, a.ref.offset):
        return b, a
    return a, b
