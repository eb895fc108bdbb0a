"""Directed graph with per-vertex locks.

Vertices and edges are separate payloads; an edge payload names its
endpoints by vertex id, so no payload ever points at another block.
"""

from __future__ import annotations

import struct
import threading

from ..errors import MissingVertex, OldSeeNewException
from ..payload import BytesField, PayloadLayout, U64Field
from .base import LoggedStructure, keep_newer, run_partitioned

VERTEX_TAG = 3
EDGE_TAG = 4

_EDGE_REC = struct.Struct("<QQI")


def vertex_layout(attr_bytes: int = 64) -> PayloadLayout:
    return PayloadLayout("vertex", VERTEX_TAG, [U64Field("vid"), BytesField("attr", attr_bytes)])


def edge_layout(attr_bytes: int = 64) -> PayloadLayout:
    return PayloadLayout("edge", EDGE_TAG,
                         [U64Field("src"), U64Field("dst"), BytesField("attr", attr_bytes)])


class _Edge:
    __slots__ = ("handle",)

    def __init__(self, handle):
        self.handle = handle


class _Vertex:
    __slots__ = ("handle", "out", "inc")

    def __init__(self, handle):
        self.handle = handle
        self.out: dict[int, _Edge] = {}
        self.inc: dict[int, _Edge] = {}

    def neighbours(self) -> set[int]:
        return set(self.out) | set(self.inc)


class PersistentGraph(LoggedStructure):

    def __init__(self, rt, attr_bytes: int = 64, log=None):
        super().__init__(rt, log)
        self.vlayout = vertex_layout(attr_bytes)
        self.elayout = edge_layout(attr_bytes)
        self.layouts = (self.vlayout, self.elayout)
        self._v: dict[int, _Vertex] = {}
        self._locks: dict[int, threading.Lock] = {}

    # -- locking ---------------------------------------------------------
    def _lock(self, vid: int) -> threading.Lock:
        lock = self._locks.get(vid)
        if lock is None:
            lock = self._locks.setdefault(vid, threading.Lock())
        return lock

    def _acquire(self, ids) -> list:
        locks = [self._lock(v) for v in sorted(set(ids))]
        for lk in locks:
            lk.acquire()
        return locks

    @staticmethod
    def _release(locks) -> None:
        for lk in reversed(locks):
            lk.release()

    def _require(self, *ids):
        for v in ids:
            if v not in self._v:
                raise MissingVertex(v)

    def _safe_get(self, ctx, h, name):
        try:
            return ctx.get(h, name)
        except OldSeeNewException as exc:
            self._unreachable(exc)

    # -- operations --------------------------------------------------------
    def add_vertex(self, vid: int, attr: bytes = b"") -> bool:
        """Create ``vid`` or overwrite its attributes; True if it was new."""
        ctx = self._ctx()
        locks = self._acquire([vid])
        try:
            with ctx.operation():
                v = self._v.get(vid)
                if v is None:
                    self._v[vid] = _Vertex(ctx.pnew(self.vlayout, vid=vid, attr=attr))
                else:
                    v.handle = ctx.set(v.handle, "attr", attr)
                self._record(("v", vid), "add_vertex", (vid, bytes(attr)), v is None, ctx.op_epoch)
                return v is None
        finally:
            self._release(locks)

    def add_edge(self, src: int, dst: int, attr: bytes = b"") -> bool:
        """Create or update edge src->dst; True if it was new."""
        ctx = self._ctx()
        locks = self._acquire([src, dst])
        try:
            self._require(src, dst)
            with ctx.operation():
                s = self._v[src]
                e = s.out.get(dst)
                if e is None:
                    e = _Edge(ctx.pnew(self.elayout, src=src, dst=dst, attr=attr))
                    s.out[dst] = e
                    self._v[dst].inc[src] = e
                    new = True
                else:
                    e.handle = ctx.set(e.handle, "attr", attr)
                    new = False
                self._record(("v", src), "add_edge", (src, dst, bytes(attr)), new, ctx.op_epoch)
                return new
        finally:
            self._release(locks)

    def remove_edge(self, src: int, dst: int) -> bool:
        ctx = self._ctx()
        locks = self._acquire([src, dst])
        try:
            with ctx.operation():
                s = self._v.get(src)
                e = s.out.get(dst) if s is not None else None
                if e is not None:
                    ctx.pdelete(e.handle)
                    del s.out[dst]
                    del self._v[dst].inc[src]
                self._record(("v", src), "remove_edge", (src, dst), e is not None, ctx.op_epoch)
                return e is not None
        finally:
            self._release(locks)

    def get_edge(self, src: int, dst: int) -> bytes | None:
        ctx = self._ctx()
        locks = self._acquire([src, dst])
        try:
            s = self._v.get(src)
            e = s.out.get(dst) if s is not None else None
            return None if e is None else ctx.get(e.handle, "attr")
        finally:
            self._release(locks)

    def get_vertex(self, vid: int) -> bytes | None:
        ctx = self._ctx()
        with self._lock(vid):
            v = self._v.get(vid)
            return None if v is None else ctx.get(v.handle, "attr")

    def clear_vertex(self, vid: int) -> bool:
        """Delete ``vid`` and all its in- and out-edges in one operation."""
        ctx = self._ctx()
        while True:
            with self._lock(vid):
                v = self._v.get(vid)
                if v is None:
                    return False
                seen = v.neighbours()
            locks = self._acquire(seen | {vid})
            try:
                v = self._v.get(vid)
                if v is None:
                    return False
                nbrs = v.neighbours()
                if not nbrs <= seen:
                    continue        # a new neighbour appeared; lock the larger set
                with ctx.operation():
                    for dst, e in v.out.items():
                        ctx.pdelete(e.handle)
                        if dst != vid:
                            del self._v[dst].inc[vid]
                    for src, e in v.inc.items():
                        if src == vid:
                            continue    # self-loop already deleted above
                        ctx.pdelete(e.handle)
                        del self._v[src].out[vid]
                    ctx.pdelete(v.handle)
                    del self._v[vid]
                    self._record(("v", vid), "clear_vertex", (vid,), True, ctx.op_epoch)
                return True
            finally:
                self._release(locks)

    def __contains__(self, vid):
        return vid in self._v

    @property
    def vertex_count(self) -> int:
        return len(self._v)

    @property
    def edge_count(self) -> int:
        return sum(len(v.out) for v in list(self._v.values()))

    def snapshot(self) -> tuple[dict[int, bytes], dict[tuple[int, int], bytes]]:
        ctx = self._ctx()
        verts, edges = {}, {}
        for vid, v in sorted(self._v.items()):
            verts[vid] = ctx.get_unsafe(v.handle, "attr")
            for dst, e in v.out.items():
                edges[(vid, dst)] = ctx.get_unsafe(e.handle, "attr")
        return verts, edges

    def bulk_load(self, edges, vertex_attr: bytes = b"") -> None:
        """Add every endpoint as a vertex, then every edge."""
        edges = list(edges)
        for vid in sorted({v for s, d, _ in edges for v in (s, d)}):
            if vid not in self._v:
                self.add_vertex(vid, vertex_attr)
        for s, d, attr in edges:
            self.add_edge(s, d, attr)

    # -- recovery ------------------------------------------------------
    @classmethod
    def recover(cls, rt, rs, k: int = 1, attr_bytes: int = 64, log=None) -> PersistentGraph:
        """Parallel rebuild: vertices first, then edges.

        Vertex ``v`` is owned by thread ``v % k``.  Each thread scans its
        iterator and forwards records to their owners through per-pair
        buffers; edges whose endpoints did not survive are discarded.
        """
        g = cls(rt, attr_bytes, log)
        vtag, etag = g.vlayout.tag_bytes, g.elayout.tag_bytes
        vdec, edec = g.vlayout.decode, g.elayout.decode
        vbuf = [[[] for _ in range(k)] for _ in range(k)]   # vbuf[from][to]
        ebuf = [[[] for _ in range(k)] for _ in range(k)]
        inbuf = [[[] for _ in range(k)] for _ in range(k)]
        losers = [[] for _ in range(k)]
        issues = [[] for _ in range(k)]
        local = [dict() for _ in range(k)]
        barrier = threading.Barrier(k)

        def work(i, it):
            for s in it:
                tag = s.payload[:4]
                if tag == vtag:
                    vid = vdec(s.payload)["vid"]
                    vbuf[i][vid % k].append((vid, g._handle(s, g.vlayout)))
                elif tag == etag:
                    src = edec(s.payload)["src"]
                    ebuf[i][src % k].append(s)
                else:
                    issues[i].append(f"foreign payload at offset {s.ref.offset}")
            if k > 1:
                barrier.wait()
            mine = local[i]
            for j in range(k):
                for vid, h in vbuf[j][i]:
                    old = mine.get(vid)
                    if old is None:
                        mine[vid] = _Vertex(h)
                    else:
                        win, lose = keep_newer(old.handle, h)
                        old.handle = win
                        losers[i].append(lose)
                        issues[i].append(f"duplicate vertex {vid}")
            if k > 1:
                barrier.wait()
            for j in range(k):
                for s in ebuf[j][i]:
                    rec = edec(s.payload)
                    src, dst = rec["src"], rec["dst"]
                    h = g._handle(s, g.elayout)
                    sv, dv = mine.get(src), local[dst % k].get(dst)
                    if sv is None or dv is None:
                        losers[i].append(h)
                        issues[i].append(f"dangling edge {src}->{dst} discarded")
                        continue
                    e = sv.out.get(dst)
                    if e is not None:
                        win, lose = keep_newer(e.handle, h)
                        e.handle = win
                        losers[i].append(lose)
                        issues[i].append(f"duplicate edge {src}->{dst}")
                        continue
                    e = sv.out[dst] = _Edge(h)
                    inbuf[i][dst % k].append((src, dst, e))
            if k > 1:
                barrier.wait()
            for j in range(k):
                for src, dst, e in inbuf[j][i]:
                    mine[dst].inc[src] = e

        run_partitioned(rs, k, work)
        for part in local:
            g._v.update(part)
        for part in issues:
            g.recovery_issues += part
        g._discard(h for part in losers for h in part)
        return g


# -- edge-list files -----------------------------------------------------

def read_edge_text(path) -> list[tuple[int, int, bytes]]:
    """Adjacency list, one ``src dst`` pair per line; ``#`` starts a comment."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].split()
            if not line:
                continue
            if len(line) != 2:
                raise ValueError(f"{path}: expected 'src dst', got {' '.join(line)!r}")
            out.append((int(line[0]), int(line[1]), b""))
    return out


def write_edge_text(path, edges) -> None:
    with open(path, "w") as f:
        for s, d, *_ in edges:
            f.write(f"{s} {d}\n")


def read_edge_binary(path) -> list[tuple[int, int, bytes]]:
    """Records of (u64 src, u64 dst, u32 attr_len, attr bytes), little-endian."""
    data = open(path, "rb").read()
    out, off = [], 0
    while off < len(data):
        if off + _EDGE_REC.size > len(data):
            raise ValueError(f"{path}: truncated record at byte {off}")
        s, d, n = _EDGE_REC.unpack_from(data, off)
        off += _EDGE_REC.size
        if off + n > len(data):
            raise ValueError(f"{path}: truncated attribute at byte {off}")
        out.append((s, d, data[off:off + n]))
        off += n
    return out


def write_edge_binary(path, edges) -> None:
    with open(path, "wb") as f:
        for s, d, attr in edges:
            f.write(_EDGE_REC.pack(s, d, len(attr)) + bytes(attr))
