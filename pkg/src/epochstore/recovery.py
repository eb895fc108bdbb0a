"""Post-crash filtering of heap blocks.

A block survives iff its epoch is at most ``crash_epoch - 2``, no DELETE
block for its uid survives the same cutoff, and it has the highest
(epoch, offset) among the remaining blocks of its uid.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import numpy as np

from .errors import CorruptImage
from .persist.heap import Heap, HeapImage, scan_arrays
from .persist.layout import LINE_BYTES, BlkType, BlockRef, PayloadHeader


@dataclass(frozen=True)
class Survivor:
    ref: BlockRef
    header: PayloadHeader
    payload: bytes

    @property
    def uid(self) -> int:
        return self.header.uid

    @property
    def epoch(self) -> int:
        return self.header.epoch


class RecoveredSet:
    """Surviving payloads in scan order, handed out through k disjoint iterators."""

    def __init__(self, survivors: list[Survivor], crash_epoch: int, k: int = 1,
                 dropped: list[BlockRef] | None = None, max_uid: int = 0):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.survivors = survivors
        self.crash_epoch = crash_epoch
        self.k = k
        self.dropped = dropped or []
        self.max_uid = max_uid

    def __len__(self):
        return len(self.survivors)

    def __iter__(self):
        return iter(self.survivors)

    def iterators(self, k: int | None = None) -> list:
        """Round-robin partition of the survivors; each iterator is single-consumer."""
        k = self.k if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")
        return [itertools.islice(self.survivors, i, None, k) for i in range(k)]

    def key_set(self) -> set[tuple[int, int, int]]:
        return {(s.uid, s.epoch, s.ref.offset) for s in self.survivors}


def _source_buffer(source):
    if isinstance(source, Heap):
        return source.backend.view(), source.layout, source.read_clock()
    if isinstance(source, HeapImage):
        return source.data, source.layout, source.crash_epoch
    if isinstance(source, (bytes, bytearray)):
        img = HeapImage(bytes(source))
        return img.data, img.layout, img.crash_epoch
    if isinstance(source, (str, os.PathLike)):
        img = HeapImage(open(source, "rb").read())
        return img.data, img.layout, img.crash_epoch
    raise TypeError(f"cannot recover from {type(source).__name__}")


def _check(a: dict) -> None:
    bad = a["size_class"] != a["slab_class"]
    bad |= a["payload_len"] > a["block_bytes"] - LINE_BYTES
    bad |= (a["blk_type"] == int(BlkType.DELETE)) & (a["payload_len"] != 0)
    bad |= a["uid"] == 0
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise CorruptImage(f"inconsistent live header at offset {int(a['offset'][i])}")


def select_survivors(a: dict, crash_epoch: int) -> np.ndarray:
    """Indices (address order) of surviving blocks in scan arrays ``a``."""
    n = len(a["offset"])
    if n == 0 or crash_epoch < 2:
        return np.zeros(0, np.int64)
    cut = np.uint64(crash_epoch - 2)
    idx = np.nonzero(a["epoch"] <= cut)[0]
    uid = a["uid"][idx]
    dead = np.unique(uid[a["blk_type"][idx] == int(BlkType.DELETE)])
    idx = idx[~np.isin(uid, dead)]
    if not len(idx):
        return idx
    # highest (epoch, offset) per uid: sort by uid then epoch then offset, keep last
    order = np.lexsort((a["offset"][idx], a["epoch"][idx], a["uid"][idx]))
    idx = idx[order]
    u = a["uid"][idx]
    last = np.ones(len(idx), bool)
    last[:-1] = u[:-1] != u[1:]
    return np.sort(idx[last])


def recover(source, k: int = 1, crash_epoch: int | None = None) -> RecoveredSet:
    """Filter the live blocks of a heap, image or heap file down to the survivors.

    ``crash_epoch`` overrides the clock stored in the source; passing a
    value beyond the current clock applies only the uid rules, which gives
    the abstract contents of a quiescent live heap.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    buf, layout, stored = _source_buffer(source)
    crash_epoch = stored if crash_epoch is None else crash_epoch
    a = scan_arrays(buf, layout)
    _check(a)
    keep = select_survivors(a, crash_epoch)
    mask = np.zeros(len(a["offset"]), bool)
    mask[keep] = True
    offs, sizes = a["offset"].tolist(), a["block_bytes"].tolist()
    cols = [a[c][keep].tolist() for c in ("blk_type", "epoch", "uid", "payload_len", "size_class")]
    types = {int(t): t for t in BlkType}
    survivors = []
    for i, t, epoch, uid, plen, sc in zip(keep.tolist(), *cols):
        off = offs[i]
        body = bytes(buf[off + LINE_BYTES:off + LINE_BYTES + plen])
        survivors.append(Survivor(BlockRef(off, sizes[i]),
                                  PayloadHeader(types[t], epoch, uid, plen, sc), body))
    dropped = [BlockRef(offs[i], sizes[i]) for i in np.nonzero(~mask)[0].tolist()]
    max_uid = int(a["uid"].max()) if len(a["uid"]) else 0
    return RecoveredSet(survivors, crash_epoch, k, dropped, max_uid)


def reference_filter(blocks, crash_epoch: int) -> list:
    """Direct restatement of the survival rule over ``(offset, header)`` pairs.

    Quadratic and deliberately naive; used to cross-check ``recover``.
    """
    cut = crash_epoch - 2
    eligible = [(off, h) for off, h in blocks if h.epoch <= cut]
    out = []
    for off, h in eligible:
        if h.blk_type == BlkType.DELETE:
            continue
        group = [(o, g) for o, g in eligible if g.uid == h.uid]
        if any(g.blk_type == BlkType.DELETE for _, g in group):
            continue
        best = max(group, key=lambda og: (og[1].epoch, og[0]))
        if best[0] == off:
            out.append((off, h))
    return out


def resume(heap: Heap, rs: RecoveredSet) -> None:
    """Make a recovered heap ready for new operations at epoch ``rs.crash_epoch``.

    Every live block that did not survive is tombstoned and the tombstones
    are fenced before returning, so a later crash cannot resurrect them.
    """
    for ref in rs.dropped:
        heap.free_block(ref)
    heap.write_back_tombstones()
    heap.bump_uid_counter(rs.max_uid + 1)
    heap.fence()
