from .backends import BackendCounters, MappedFileBackend, SimBackend
from .heap import Heap, HeapImage, iterate_blocks
from .layout import (DEFAULT_SIZE_CLASSES, HEADER_MAGIC, INITIAL_EPOCH, BlkType, BlockRef,
                     HeapGeometry, HeapLayout, PayloadHeader)


def heap_create(path, geometry: HeapGeometry, backend: str = "file", **sim_opts) -> Heap:
    return Heap.create(path, geometry, backend, **sim_opts)


def heap_open(path) -> tuple[Heap, int]:
    return Heap.open(path)


__all__ = [
    "BackendCounters", "BlkType", "BlockRef", "DEFAULT_SIZE_CLASSES", "HEADER_MAGIC",
    "Heap", "HeapGeometry", "HeapImage", "HeapLayout", "INITIAL_EPOCH", "MappedFileBackend",
    "PayloadHeader", "SimBackend", "heap_create", "heap_open", "iterate_blocks",
]
