from .graph import (PersistentGraph, edge_layout, read_edge_binary, read_edge_text, vertex_layout,
                    write_edge_binary, write_edge_text)
from .hashmap import PersistentHashMap, fnv1a, map_layout
from .queue import PersistentQueue, queue_layout

STRUCTURES = {"queue": PersistentQueue, "map": PersistentHashMap, "graph": PersistentGraph}

__all__ = [
    "PersistentGraph", "PersistentHashMap", "PersistentQueue", "STRUCTURES", "edge_layout",
    "fnv1a", "map_layout", "queue_layout", "read_edge_binary", "read_edge_text",
    "vertex_layout", "write_edge_binary", "write_edge_text",
]
