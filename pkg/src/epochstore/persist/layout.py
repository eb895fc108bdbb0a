"""On-media layout: geometry, superblock, slab directory and block headers.

All multi-byte integers are little-endian.  The file is organised as::

    line 0      superblock
    line 1      epoch clock (u64)
    line 2      uid counter (u64)
    line 3..    directory: u32 size class table, then one 16-byte entry
                per slab (start u64, class index u32, block count u32)
    data        slabs, each a run of equally sized blocks

Every block starts with a 32-byte header padded to a full line; the
payload begins on the following line.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from ..errors import BadSuperblock, GeometryError

SUPER_MAGIC = b"MTGH"
FORMAT_VERSION = 1
HEADER_MAGIC = 0x4D544745
INITIAL_EPOCH = 4
DEFAULT_SIZE_CLASSES = (64, 256, 1088, 4160)

# magic, version, total_bytes, line_bytes, n_classes, slabs_per_class,
# slab_bytes, clock_offset, uid_offset, dir_offset, data_offset
SUPERBLOCK = struct.Struct("<4sIQIIIIQQQQ")
# magic, blk_type, size_class, pad, epoch, uid, payload_len, pad
HEADER = struct.Struct("<IBBHQQII")
SLAB_ENTRY = struct.Struct("<QII")
U64 = struct.Struct("<Q")

assert SUPERBLOCK.size == 64
assert HEADER.size == 32


class BlkType(enum.IntEnum):
    ALLOC = 1
    UPDATE = 2
    DELETE = 3


@dataclass(frozen=True)
class PayloadHeader:
    blk_type: BlkType
    epoch: int
    uid: int
    payload_len: int
    size_class: int = 0
    magic: int = HEADER_MAGIC

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, int(self.blk_type), self.size_class, 0,
                           self.epoch, self.uid, self.payload_len, 0)

    @classmethod
    def unpack(cls, buf, offset=0) -> PayloadHeader | None:
        """Decode a header, or None if the magic/type is not live."""
        magic, t, sc, _, epoch, uid, plen, _ = HEADER.unpack_from(buf, offset)
        if magic != HEADER_MAGIC or t not in (1, 2, 3):
            return None
        return cls(BlkType(t), epoch, uid, plen, sc, magic)


SCRUBBED_HEADER = bytes(HEADER.size)


@dataclass(frozen=True)
class BlockRef:
    offset: int
    len: int

    @property
    def payload_offset(self) -> int:
        # header always occupies one full line
        return self.offset + LINE_BYTES


LINE_BYTES = 64


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


@dataclass(frozen=True)
class HeapGeometry:
    total_bytes: int
    line_bytes: int = LINE_BYTES
    size_classes: tuple[int, ...] = DEFAULT_SIZE_CLASSES
    slabs_per_class: int = 1

    def __post_init__(self):
        object.__setattr__(self, "size_classes", tuple(self.size_classes))

    def validate(self) -> None:
        if self.line_bytes != LINE_BYTES:
            raise GeometryError(f"line size must be {LINE_BYTES}, got {self.line_bytes}")
        cls = self.size_classes
        if not cls:
            raise GeometryError("at least one size class is required")
        if any(c <= 0 or c % self.line_bytes for c in cls):
            raise GeometryError(f"size classes must be positive multiples of {self.line_bytes}: {cls}")
        if list(cls) != sorted(set(cls)):
            raise GeometryError(f"size classes must be strictly ascending: {cls}")
        if len(cls) > 255:
            raise GeometryError("too many size classes")
        if self.slabs_per_class < 1:
            raise GeometryError("slabs_per_class must be >= 1")
        layout = HeapLayout.compute(self)
        if any(s.nblocks < 1 for s in layout.slabs):
            raise GeometryError(f"heap of {self.total_bytes} bytes is too small for classes {cls}")


@dataclass(frozen=True)
class Slab:
    start: int
    class_index: int
    block_bytes: int
    nblocks: int

    @property
    def end(self) -> int:
        return self.start + self.block_bytes * self.nblocks


@dataclass(frozen=True)
class HeapLayout:
    geometry: HeapGeometry
    clock_offset: int
    uid_offset: int
    dir_offset: int
    data_offset: int
    slab_bytes: int
    slabs: tuple[Slab, ...] = field(repr=False)

    @classmethod
    def compute(cls, g: HeapGeometry) -> HeapLayout:
        line = g.line_bytes
        n_slabs = len(g.size_classes) * g.slabs_per_class
        dir_offset = 3 * line
        dir_bytes = 4 * len(g.size_classes) + SLAB_ENTRY.size * n_slabs
        data_offset = _align(dir_offset + dir_bytes, line)
        avail = max(0, g.total_bytes - data_offset)
        slab_bytes = (avail // n_slabs) // line * line
        slabs = []
        for i in range(n_slabs):
            ci = i % len(g.size_classes)
            bb = g.size_classes[ci]
            slabs.append(Slab(data_offset + i * slab_bytes, ci, bb, slab_bytes // bb))
        return cls(g, line, 2 * line, dir_offset, data_offset, slab_bytes, tuple(slabs))

    def superblock(self) -> bytes:
        g = self.geometry
        return SUPERBLOCK.pack(SUPER_MAGIC, FORMAT_VERSION, g.total_bytes, g.line_bytes,
                               len(g.size_classes), g.slabs_per_class, self.slab_bytes,
                               self.clock_offset, self.uid_offset, self.dir_offset,
                               self.data_offset)

    def directory(self) -> bytes:
        parts = [struct.pack(f"<{len(self.geometry.size_classes)}I", *self.geometry.size_classes)]
        parts += [SLAB_ENTRY.pack(s.start, s.class_index, s.nblocks) for s in self.slabs]
        raw = b"".join(parts)
        return raw + bytes(self.data_offset - self.dir_offset - len(raw))

    @classmethod
    def parse(cls, buf) -> HeapLayout:
        """Rebuild the layout from an on-media superblock and directory."""
        if len(buf) < SUPERBLOCK.size:
            raise BadSuperblock("file shorter than a superblock")
        (magic, version, total, line, n_classes, spc, slab_bytes,
         clock_off, uid_off, dir_off, data_off) = SUPERBLOCK.unpack_from(buf, 0)
        if magic != SUPER_MAGIC or version != FORMAT_VERSION:
            raise BadSuperblock(f"bad magic/version {magic!r}/{version}")
        if len(buf) < total:
            raise BadSuperblock(f"image is {len(buf)} bytes, superblock says {total}")
        if n_classes < 1 or dir_off + 4 * n_classes > len(buf):
            raise BadSuperblock("corrupt size class table")
        classes = struct.unpack_from(f"<{n_classes}I", buf, dir_off)
        g = HeapGeometry(total, line, classes, spc)
        layout = cls.compute(g)
        if (layout.clock_offset, layout.uid_offset, layout.dir_offset, layout.data_offset,
                layout.slab_bytes) != (clock_off, uid_off, dir_off, data_off, slab_bytes):
            raise BadSuperblock("superblock offsets disagree with geometry")
        pos = dir_off + 4 * n_classes
        for s in layout.slabs:
            start, ci, nb = SLAB_ENTRY.unpack_from(buf, pos)
            pos += SLAB_ENTRY.size
            if (start, ci, nb) != (s.start, s.class_index, s.nblocks):
                raise BadSuperblock("slab directory disagrees with geometry")
        return layout

    def class_for(self, payload_len: int) -> int | None:
        need = self.geometry.line_bytes + payload_len
        for i, c in enumerate(self.geometry.size_classes):
            if c >= need:
                return i
        return None

    def block_offsets(self, class_index: int | None = None):
        for s in self.slabs:
            if class_index is None or s.class_index == class_index:
                yield from range(s.start, s.end, s.block_bytes)

    def slab_of(self, offset: int) -> Slab | None:
        if offset < self.data_offset or not self.slab_bytes:
            return None
        i = (offset - self.data_offset) // self.slab_bytes
        if i >= len(self.slabs):
            return None
        s = self.slabs[i]
        if offset >= s.end or (offset - s.start) % s.block_bytes:
            return None
        return s
