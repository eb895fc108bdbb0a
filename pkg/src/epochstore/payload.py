"""Typed payload layouts and the transient handles that point at them."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .persist.layout import BlkType, BlockRef

_TAG = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class U64Field:
    name: str
    size: int = 8

    def encode(self, v) -> bytes:
        return _U64.pack(v)

    def decode(self, buf, off):
        return _U64.unpack_from(buf, off)[0]

    def default(self):
        return 0


@dataclass(frozen=True)
class BytesField:
    """Byte string up to ``capacity`` bytes, stored length-prefixed and padded."""

    name: str
    capacity: int

    @property
    def size(self) -> int:
        return 4 + self.capacity

    def encode(self, v) -> bytes:
        v = bytes(v)
        if len(v) > self.capacity:
            raise ValueError(f"{self.name}: {len(v)} bytes exceed capacity {self.capacity}")
        return _LEN.pack(len(v)) + v + bytes(self.capacity - len(v))

    def decode(self, buf, off):
        n = _LEN.unpack_from(buf, off)[0]
        return bytes(buf[off + 4:off + 4 + n])

    def default(self):
        return b""


class PayloadLayout:
    """Fixed record layout of one payload type; the first 4 bytes hold ``tag``."""

    def __init__(self, name: str, tag: int, fields):
        self.name = name
        self.tag = tag
        self.tag_bytes = _TAG.pack(tag)
        self.fields = tuple(fields)
        self._by_name = {}
        off = _TAG.size
        for f in self.fields:
            self._by_name[f.name] = (f, off)
            off += f.size
        self.size = off

    def __repr__(self):
        return f"PayloadLayout({self.name!r}, tag={self.tag}, size={self.size})"

    def field(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise AttributeError(f"{self.name} has no field {name!r}") from None

    def encode(self, values: dict) -> bytes:
        unknown = set(values) - set(self._by_name)
        if unknown:
            raise AttributeError(f"{self.name} has no fields {sorted(unknown)}")
        parts = [_TAG.pack(self.tag)]
        for f in self.fields:
            parts.append(f.encode(values.get(f.name, f.default())))
        return b"".join(parts)

    def decode(self, buf) -> dict:
        return {f.name: f.decode(buf, off) for f, off in self._by_name.values()}

    def matches(self, buf) -> bool:
        return len(buf) >= self.size and _TAG.unpack_from(buf, 0)[0] == self.tag


def payload_tag(buf) -> int | None:
    if len(buf) < 4:
        return None
    return _TAG.unpack_from(buf, 0)[0]


class PayloadHandle:
    """Transient reference to one payload block.

    ``epoch`` is None until the payload is stamped (PNEW outside an
    operation).  ``anti`` is the attached anti-payload left by a
    cross-epoch PRETIRE; ``superseded_in`` is the epoch whose free list
    holds this block's predecessor version, if any.  Neither is persistent.
    """

    __slots__ = ("ref", "layout", "blk_type", "epoch", "uid", "anti", "superseded_in")

    def __init__(self, ref: BlockRef, layout: PayloadLayout | None, blk_type: BlkType,
                 epoch: int | None, uid: int):
        self.ref = ref
        self.layout = layout
        self.blk_type = blk_type
        self.epoch = epoch
        self.uid = uid
        self.anti: PayloadHandle | None = None
        self.superseded_in: int | None = None

    def __repr__(self):
        kind = self.layout.name if self.layout else "anti"
        return (f"<{kind} {self.blk_type.name} uid={self.uid} epoch={self.epoch} "
                f"@{self.ref.offset}>")

    @property
    def payload_len(self) -> int:
        return self.layout.size if self.layout is not None else 0
