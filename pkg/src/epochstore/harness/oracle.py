"""Sequential reference semantics for the logged structures."""

from __future__ import annotations

from collections import deque

from ..errors import IllFormedLog

FAMILIES = {
    "queue": {"enqueue", "dequeue"},
    "map": {"put", "insert", "remove"},
    "graph": {"add_vertex", "add_edge", "remove_edge", "clear_vertex"},
}


def log_family(entries) -> str | None:
    kinds = {e.kind for e in entries}
    if not kinds:
        return None
    for fam, allowed in FAMILIES.items():
        if kinds <= allowed:
            return fam
    raise IllFormedLog(f"operation kinds {sorted(kinds)} do not belong to one structure")


def _mismatch(e, got):
    raise IllFormedLog(f"op #{e.seq} {e.kind}{e.args} logged result {e.result!r}, "
                       f"sequential replay gives {got!r}")


def _replay_queue(entries, check):
    q = deque()
    for e in entries:
        if e.kind == "enqueue":
            q.append(e.args[0])
        else:
            got = q.popleft() if q else None
            if check and got != e.result:
                _mismatch(e, got)
    return list(q)


def _replay_map(entries, check):
    m = {}
    for e in entries:
        key = e.args[0]
        if e.kind == "put":
            got = m.get(key)
            m[key] = e.args[1]
        elif e.kind == "insert":
            got = key not in m
            if got:
                m[key] = e.args[1]
        else:
            got = m.pop(key, None)
        if check and got != e.result:
            _mismatch(e, got)
    return m


def _replay_graph(entries, check):
    verts, edges = {}, {}
    for e in entries:
        if e.kind == "add_vertex":
            vid, attr = e.args
            got = vid not in verts
            verts[vid] = attr
        elif e.kind == "add_edge":
            s, d, attr = e.args
            if s not in verts or d not in verts:
                raise IllFormedLog(f"op #{e.seq} adds edge {s}->{d} between missing vertices")
            got = (s, d) not in edges
            edges[(s, d)] = attr
        elif e.kind == "remove_edge":
            got = edges.pop(tuple(e.args), None) is not None
        else:
            (vid,) = e.args
            got = verts.pop(vid, None) is not None
            for key in [k for k in edges if vid in k]:
                del edges[key]
        if check and got != e.result:
            _mismatch(e, got)
    return verts, edges


_REPLAY = {"queue": _replay_queue, "map": _replay_map, "graph": _replay_graph}
_EMPTY = {"queue": list, "map": dict, "graph": lambda: ({}, {})}


def oracle_replay(entries, cutoff_epoch: int, family: str | None = None, check_results: bool = False):
    """Abstract state after the logged operations with epoch <= ``cutoff_epoch``.

    Entries are replayed in linearization order.  With ``check_results`` the
    logged return values must agree with the sequential replay.
    """
    entries = list(entries)
    seqs = set()
    for e in entries:
        if not isinstance(e.seq, int) or not isinstance(e.epoch, int):
            raise IllFormedLog(f"entry {e!r} lacks an integer seq/epoch")
        if e.seq in seqs:
            raise IllFormedLog(f"duplicate sequence number {e.seq}")
        seqs.add(e.seq)
    fam = family or log_family(entries)
    if fam is None:
        return []
    if fam not in _REPLAY:
        raise IllFormedLog(f"unknown structure family {fam!r}")
    bad = {e.kind for e in entries} - FAMILIES[fam]
    if bad:
        raise IllFormedLog(f"kinds {sorted(bad)} do not belong to {fam}")
    chosen = sorted((e for e in entries if e.epoch <= cutoff_epoch), key=lambda e: e.seq)
    if not chosen:
        return _EMPTY[fam]()
    return _REPLAY[fam](chosen, check_results)
