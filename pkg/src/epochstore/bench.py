"""Throughput and recovery-time benchmarks emitting CSV rows."""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import random
import sys
import tempfile
import threading
import time
from dataclasses import dataclass

from .errors import ConfigError, MissingVertex, OutOfMemory
from .persist.heap import Heap
from .persist.layout import LINE_BYTES, HeapGeometry
from .recovery import recover, resume
from .runtime import AdvancerConfig, EpochRuntime, make_strategy
from .structures import PersistentGraph, PersistentHashMap, PersistentQueue
from .structures.graph import edge_layout, read_edge_binary, read_edge_text, vertex_layout
from .structures.hashmap import map_layout
from .structures.queue import queue_layout

CSV_COLUMNS = ("structure", "mix", "value_bytes", "key_range", "buckets", "threads", "strategy",
               "epoch_ms", "backend", "seed", "ops", "seconds", "ops_per_sec", "writes_back",
               "fences", "lines_flushed", "epochs_elapsed")
RECOVERY_COLUMNS = ("structure", "payload_bytes", "payloads", "k", "seconds")

DEFAULT_MIX = {"map": "2:1:1", "queue": "1:1", "graph": "10:5:10:1"}
MIX_NAMES = {"map": ("get", "insert", "remove"), "queue": ("enqueue", "dequeue"),
             "graph": ("add_edge", "remove_edge", "get_edge", "clear_vertex")}
STRATEGIES = ("perepoch", "buffered", "direct")


@dataclass(frozen=True)
class BenchConfig:
    structure: str = "map"
    mix: str = ""
    value_bytes: int = 1024
    key_range: int = 100_000
    buckets: int = 1 << 17
    threads: int = 1
    seconds: float = 5.0
    ops: int | None = None
    strategy: str = "perepoch"
    epoch_ms: float = 50.0
    backend: str = "sim"
    out: str | None = None
    seed: int = 1
    preload: bool = True

    def __post_init__(self):
        if not self.mix:
            object.__setattr__(self, "mix", DEFAULT_MIX.get(self.structure, ""))

    def validate(self) -> BenchConfig:
        if self.structure not in MIX_NAMES:
            raise ConfigError(f"unknown structure {self.structure!r}")
        ratios = self.ratios()
        if len(ratios) != len(MIX_NAMES[self.structure]):
            raise ConfigError(f"{self.structure} mix needs {len(MIX_NAMES[self.structure])} "
                              f"ratios ({':'.join(MIX_NAMES[self.structure])})")
        if any(r < 0 for r in ratios) or not sum(ratios):
            raise ConfigError("mix ratios must be nonnegative and not all zero")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.value_bytes < 1 or self.key_range < 1 or self.buckets < 1:
            raise ConfigError("value_bytes, key_range and buckets must be >= 1")
        if self.ops is None and self.seconds <= 0:
            raise ConfigError("seconds must be positive")
        if self.ops is not None and self.ops < 1:
            raise ConfigError("ops must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}")
        if self.epoch_ms <= 0:
            raise ConfigError("epoch length must be positive")
        if self.backend not in ("sim", "real"):
            raise ConfigError("backend must be sim or real")
        return self

    def ratios(self) -> tuple[float, ...]:
        try:
            return tuple(float(x) for x in self.mix.split(":"))
        except ValueError:
            raise ConfigError(f"bad mix {self.mix!r}; expected ratios like 2:1:1") from None


# -- flag parsing ----------------------------------------------------------

def _list(kind):
    def conv(text):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad value list {text!r}") from None
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epochstore bench",
                                description="Run a throughput benchmark and emit CSV rows. "
                                            "Comma-separated values sweep that parameter.")
    p.add_argument("--structure", type=_list(str), default=["map"], help="queue, map or graph")
    p.add_argument("--mix", type=_list(str), default=None,
                   help="ratios, e.g. 2:1:1 (map get:insert:remove), 1:1 (queue enq:deq), "
                        "10:5:10:1 (graph add:remove:get:clear)")
    p.add_argument("--value-bytes", type=_list(int), default=[1024])
    p.add_argument("--key-range", type=int, default=100_000)
    p.add_argument("--buckets", type=int, default=1 << 17)
    p.add_argument("--threads", type=_list(int), default=[1])
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--ops", type=int, default=None, help="stop after this many operations")
    p.add_argument("--strategy", type=_list(str), default=["perepoch"],
                   help="perepoch, buffered or direct")
    p.add_argument("--epoch-ms", type=_list(float), default=[50.0])
    p.add_argument("--backend", default="sim", choices=("sim", "real"))
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--seed", type=int, default=1)
    return p


def parse_flags(argv) -> list[BenchConfig]:
    """Parse CLI flags into one config per point of the requested sweep."""
    p = build_parser()
    a = p.parse_args(argv)
    configs = []
    for st, vb, th, sg, ms in itertools.product(a.structure, a.value_bytes, a.threads,
                                                a.strategy, a.epoch_ms):
        for mix in (a.mix or [""]):
            cfg = BenchConfig(st, mix, vb, a.key_range, a.buckets, th, a.seconds, a.ops, sg, ms,
                              a.backend, a.out, a.seed)
            try:
                configs.append(cfg.validate())
            except ConfigError as exc:
                p.error(str(exc))
    return configs


# -- heap sizing -----------------------------------------------------------

def _class_for(payload_bytes: int) -> int:
    return -(-(LINE_BYTES + payload_bytes) // LINE_BYTES) * LINE_BYTES


def bench_geometry(cfg: BenchConfig) -> HeapGeometry:
    if cfg.structure == "map":
        big = map_layout(cfg.value_bytes).size
    elif cfg.structure == "queue":
        big = queue_layout(cfg.value_bytes).size
    else:
        big = max(vertex_layout(cfg.value_bytes).size, edge_layout(cfg.value_bytes).size)
    cls = _class_for(big)
    # live data plus a few epochs of not-yet-reclaimed garbage
    blocks = cfg.key_range + 32_768
    if cfg.structure == "graph":
        blocks += 4 * cfg.key_range
    classes = (64, cls) if cls > 64 else (64,)
    total = (len(classes) * blocks * cls) + (1 << 20)
    return HeapGeometry(total, size_classes=classes)


def _make_heap(cfg: BenchConfig, path: str | None):
    geo = bench_geometry(cfg)
    if cfg.backend == "sim":
        return Heap.create(None, geo, "sim", seed=cfg.seed)
    return Heap.create(path, geo, "file")


# -- workloads -------------------------------------------------------------

def _retrying(fn, pause):
    def run(*a):
        while True:
            try:
                return fn(*a)
            except OutOfMemory:
                pause()   # wait for the advancer to reclaim
    return run


def _make_structure(cfg: BenchConfig, rt):
    if cfg.structure == "map":
        return PersistentHashMap(rt, cfg.buckets, cfg.value_bytes)
    if cfg.structure == "queue":
        return PersistentQueue(rt, cfg.value_bytes)
    return PersistentGraph(rt, cfg.value_bytes)


def _preload(cfg: BenchConfig, s, rng: random.Random) -> None:
    if not cfg.preload:
        return
    val = bytes(cfg.value_bytes)
    if cfg.structure == "map":
        for key in rng.sample(range(cfg.key_range), cfg.key_range // 2):
            s.insert(b"%d" % key, val)
    elif cfg.structure == "graph":
        for v in range(cfg.key_range):
            s.add_vertex(v, b"")


def _op_chooser(cfg: BenchConfig):
    ratios = cfg.ratios()
    total = sum(ratios)
    bounds = list(itertools.accumulate(r / total for r in ratios))
    bounds[-1] = 1.0
    return lambda x: next(i for i, b in enumerate(bounds) if x < b)


def _worker_loop(cfg, s, tid, deadline, budget, counts, pause):
    rng = random.Random(cfg.seed * 7919 + tid)
    choose = _op_chooser(cfg)
    val = bytes(cfg.value_bytes)
    n = 0
    seq = 0
    kr = cfg.key_range
    if cfg.structure == "map":
        ops = [_retrying(s.get, pause), _retrying(s.insert, pause), _retrying(s.remove, pause)]
    elif cfg.structure == "queue":
        ops = [_retrying(s.enqueue, pause), _retrying(s.dequeue, pause)]
    else:
        ops = [_retrying(s.add_edge, pause), _retrying(s.remove_edge, pause),
               _retrying(s.get_edge, pause), _retrying(s.clear_vertex, pause)]
    while True:
        if budget is not None:
            if next(budget, None) is None:
                break
        elif n & 63 == 0 and time.perf_counter() >= deadline:
            break
        i = choose(rng.random())
        if cfg.structure == "map":
            key = b"%d" % rng.randrange(kr)
            if i == 0:
                ops[0](key)
            elif i == 1:
                ops[1](key, val)
            else:
                ops[2](key)
        elif cfg.structure == "queue":
            if i == 0:
                seq += 1
                ops[0](b"%d:%d" % (tid, seq))
            else:
                ops[1]()
        else:
            a, b = rng.randrange(kr), rng.randrange(kr)
            try:
                if i == 0:
                    ops[0](a, b, b"")
                elif i == 1:
                    ops[1](a, b)
                elif i == 2:
                    ops[2](a, b)
                else:
                    ops[3](a)
            except MissingVertex:
                pass
        n += 1
    counts[tid] = n


@dataclass
class BenchResult:
    row: dict
    audit_ok: bool
    audit_detail: str = ""


def fifo_audit(q: PersistentQueue) -> tuple[bool, str]:
    """Queue indices contiguous; each producer's items appear in enqueue order."""
    idx = q.indices()
    if idx and idx != list(range(idx[0], idx[0] + len(idx))):
        return False, "indices not contiguous"
    last: dict[bytes, int] = {}
    for v in q.snapshot():
        producer, _, n = v.partition(b":")
        n = int(n)
        if n <= last.get(producer, 0):
            return False, f"producer {producer!r} out of order"
        last[producer] = n
    return True, ""


def run_bench(cfg: BenchConfig) -> BenchResult:
    cfg.validate()
    tmpdir = tempfile.mkdtemp(prefix="epochstore-bench-") if cfg.backend == "real" else None
    path = os.path.join(tmpdir, "heap.bin") if tmpdir else None
    heap = _make_heap(cfg, path)
    try:
        rt = EpochRuntime(heap, make_strategy(cfg.strategy),
                          AdvancerConfig("background", cfg.epoch_ms / 1000.0))
        s = _make_structure(cfg, rt)
        _preload(cfg, s, random.Random(cfg.seed))
        pause = lambda: time.sleep(cfg.epoch_ms / 4000.0)
        counts = [0] * cfg.threads
        budget = None
        if cfg.ops is not None:
            budget = iter(range(cfg.ops))   # shared; next() is atomic under the GIL
        rt.start()
        before = heap.counters.snapshot()
        e0 = rt.epoch
        t0 = time.perf_counter()
        deadline = t0 + cfg.seconds
        threads = [threading.Thread(target=_worker_loop,
                                    args=(cfg, s, t, deadline, budget, counts, pause))
                   for t in range(cfg.threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t0
        rt.stop()
        delta = heap.counters.snapshot() - before
        epochs = rt.epoch - e0
        if rt.advance_error is not None:
            raise rt.advance_error
        total = sum(counts)
        row = {
            "structure": cfg.structure, "mix": cfg.mix, "value_bytes": cfg.value_bytes,
            "key_range": cfg.key_range, "buckets": cfg.buckets, "threads": cfg.threads,
            "strategy": cfg.strategy, "epoch_ms": cfg.epoch_ms, "backend": cfg.backend,
            "seed": cfg.seed, "ops": total, "seconds": round(elapsed, 6),
            "ops_per_sec": round(total / elapsed, 1) if elapsed > 0 else 0.0,
            "writes_back": delta.writes_back, "fences": delta.fences,
            "lines_flushed": delta.lines_flushed, "epochs_elapsed": epochs,
        }
        ok, detail = fifo_audit(s) if cfg.structure == "queue" else (True, "")
        return BenchResult(row, ok, detail)
    finally:
        heap.close()
        if tmpdir:
            os.unlink(path)
            os.rmdir(tmpdir)


def write_rows(rows, out=None, columns=CSV_COLUMNS) -> None:
    """CSV with a header row; ``out`` is a path, a file object or None for stdout."""
    if out is None or hasattr(out, "write"):
        f, close = (out or sys.stdout), False
    else:
        f, close = open(out, "w", newline="", encoding="utf-8"), True
    try:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if close:
            f.close()


# -- recovery timing ----------------------------------------------------------

def populate_map_heap(path, payloads: int, value_bytes: int = 1024, seed: int = 1,
                      buckets: int = 1 << 17) -> None:
    """Build a file-backed map heap with ``payloads`` pairs and shut it down cleanly."""
    cls = _class_for(map_layout(value_bytes).size)
    total = 2 * (payloads + 4096) * cls + (1 << 20)
    heap = Heap.create(path, HeapGeometry(total, size_classes=(64, cls)), "file")
    try:
        rt = EpochRuntime(heap)
        m = PersistentHashMap(rt, buckets, value_bytes)
        rng = random.Random(seed)
        for i in range(payloads):
            m.insert(b"%d" % i, rng.randbytes(value_bytes))
            if i % 4096 == 4095:
                rt.advance_epoch()
        rt.sync()
    finally:
        heap.close()


def time_map_recovery(path, k: int, value_bytes: int = 1024, buckets: int = 1 << 17,
                      repeats: int = 3) -> tuple[float, int]:
    """Best-of-``repeats`` wall time to open, filter and rebuild the map with k threads."""
    best, n = float("inf"), 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        heap, _ = Heap.open(path)
        try:
            rs = recover(heap, k)
            m = PersistentHashMap.recover(None, rs, k, buckets, value_bytes)
            n = len(m)
            del m, rs
        finally:
            heap.close()
        best = min(best, time.perf_counter() - t0)
    return best, n


def run_recovery_bench(path, ks=(1, 2, 4, 8), value_bytes: int = 1024, buckets: int = 1 << 17,
                       repeats: int = 3) -> list[dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"heap file {path} does not exist; populate it first")
    rows = []
    for k in ks:
        secs, n = time_map_recovery(path, k, value_bytes, buckets, repeats)
        rows.append({"structure": "map", "payload_bytes": map_layout(value_bytes).size,
                     "payloads": n, "k": k, "seconds": round(secs, 6)})
    return rows


def graph_from_file(path, k: int = 1, backend: str = "sim", workdir=None) -> tuple:
    """Bulk-load a graph file, crash-free shutdown, recover with k threads.

    Returns ``(recovered_state, rebuilt_state, issues)``: the state rebuilt
    from the recovered heap, the state of the graph loaded directly from the
    file and the recovery issues reported while rebuilding.
    """
    edges = read_edge_binary(path) if str(path).endswith(".bin") else read_edge_text(path)
    nverts = len({v for s, d, _ in edges for v in (s, d)})
    attr = max((len(a) for _, _, a in edges), default=0)
    attr = max(attr, 8)
    cls = _class_for(edge_layout(attr).size)
    total = 2 * (len(edges) + nverts + 4096) * cls + (1 << 20)
    geo = HeapGeometry(total, size_classes=(64, cls))
    if backend == "sim":
        heap = Heap.create(None, geo, "sim")
    else:
        heap = Heap.create(os.path.join(workdir, "graph.heap"), geo, "file")
    rt = EpochRuntime(heap)
    g = PersistentGraph(rt, attr)
    g.bulk_load(edges)
    rebuilt = g.snapshot()
    rt.sync()
    if backend == "sim":
        image = heap.persistent_image()
        heap2, _ = Heap.from_image(image)
    else:
        heap.close()
        heap2, _ = Heap.open(os.path.join(workdir, "graph.heap"))
    rs = recover(heap2, k)
    resume(heap2, rs)
    g2 = PersistentGraph.recover(EpochRuntime(heap2), rs, k, attr)
    state = g2.snapshot()
    heap2.close()
    return state, rebuilt, g2.recovery_issues
