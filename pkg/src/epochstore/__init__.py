"""Buffered durable persistence for concurrent data structures.

Payload blocks are labeled with the epoch of the operation that wrote
them; a background advancer makes whole epochs durable at once, and
recovery restores the state as of two epochs before the crash.
"""

from .errors import (EpochAdvanced, EpochStoreError, OldSeeNewException, OperationStateError,
                     RuntimeStateError)
from .payload import BytesField, PayloadHandle, PayloadLayout, U64Field
from .persist import Heap, HeapGeometry, HeapImage, heap_create, heap_open, iterate_blocks
from .recovery import RecoveredSet, recover, reference_filter, resume
from .runtime import (AdvancerConfig, BufferedWB, DirectWB, EpochRuntime, PerEpoch, ThreadContext,
                      VersionedCell, make_strategy)

__version__ = "0.1.0"

__all__ = [
    "AdvancerConfig", "BufferedWB", "BytesField", "DirectWB", "EpochAdvanced", "EpochRuntime",
    "EpochStoreError", "Heap", "HeapGeometry", "HeapImage", "OldSeeNewException",
    "OperationStateError", "PayloadHandle", "PayloadLayout", "PerEpoch", "RecoveredSet",
    "RuntimeStateError", "ThreadContext", "U64Field", "VersionedCell", "heap_create", "heap_open",
    "iterate_blocks", "make_strategy", "recover", "reference_filter", "resume",
]
