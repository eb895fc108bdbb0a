"""Command-line entry point: ``epochstore bench|recovery|crashcheck``."""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from . import bench
from .harness import run_with_crashes


def _bench(argv) -> int:
    configs = bench.parse_flags(argv)
    rows = []
    status = 0
    for cfg in configs:
        res = bench.run_bench(cfg)
        rows.append(res.row)
        if not res.audit_ok:
            print(f"queue FIFO audit failed: {res.audit_detail}", file=sys.stderr)
            status = 1
    bench.write_rows(rows, configs[0].out if configs else None)
    return status


def _recovery(argv) -> int:
    p = argparse.ArgumentParser(prog="epochstore recovery",
                                description="Time map recovery for several thread counts.")
    p.add_argument("--heap", help="existing heap file (populated if --payloads is given)")
    p.add_argument("--payloads", type=int, default=None,
                   help="populate a map heap with this many pairs first")
    p.add_argument("--value-bytes", type=int, default=1024)
    p.add_argument("--buckets", type=int, default=1 << 17)
    p.add_argument("--k", default="1,2,4,8", help="comma-separated recovery thread counts")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default=None)
    a = p.parse_args(argv)
    try:
        ks = [int(x) for x in a.k.split(",") if x]
    except ValueError:
        p.error(f"bad --k list {a.k!r}")
    if not ks or min(ks) < 1:
        p.error("--k values must be >= 1")
    tmp = None
    path = a.heap
    if path is None:
        if a.payloads is None:
            p.error("give --heap, --payloads or both")
        tmp = tempfile.mkdtemp(prefix="epochstore-recovery-")
        path = os.path.join(tmp, "map.heap")
    try:
        if a.payloads is not None:
            bench.populate_map_heap(path, a.payloads, a.value_bytes, buckets=a.buckets)
        elif not os.path.exists(path):
            p.error(f"heap file {path} does not exist")
        rows = bench.run_recovery_bench(path, ks, a.value_bytes, a.buckets, a.repeats)
        bench.write_rows(rows, a.out, bench.RECOVERY_COLUMNS)
    finally:
        if tmp:
            if os.path.exists(path):
                os.unlink(path)
            os.rmdir(tmp)
    return 0


def _crashcheck(argv) -> int:
    p = argparse.ArgumentParser(prog="epochstore crashcheck",
                                description="Crash-injection runs checked against the oracle.")
    p.add_argument("--structure", default="map", choices=("queue", "map", "graph"))
    p.add_argument("--crash-points", type=int, default=200)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--mutation", default=None,
                   choices=("skip_fence", "wrong_free_slot", "no_copy_on_old_epoch"))
    p.add_argument("--jsonl", default=None, help="write one JSON object per crash point here")
    a = p.parse_args(argv)
    if a.threads < 1 or a.crash_points < 1:
        p.error("--threads and --crash-points must be >= 1")
    report = run_with_crashes(a.structure, a.crash_points, a.seed, threads=a.threads,
                              mutation=a.mutation)
    print(report.text())
    for audit in report.audits:
        for prop, msgs in audit["violations"].items():
            for m in msgs[:3]:
                print(f"  audit {prop}: {m}")
    if a.jsonl:
        with open(a.jsonl, "w") as f:
            f.write(report.jsonl() + "\n")
    return 0 if report.passed and report.audit_ok else 1


COMMANDS = {"bench": _bench, "recovery": _recovery, "crashcheck": _crashcheck}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ("-h", "--help") or argv[0] not in COMMANDS:
        print("usage: epochstore {bench,recovery,crashcheck} [options]\n"
              "  bench       throughput benchmark, CSV rows\n"
              "  recovery    recovery time of a map heap for k recovery threads\n"
              "  crashcheck  crash-injection runs checked against the sequential oracle",
              file=sys.stderr if argv and argv[0] not in ("-h", "--help") else sys.stdout)
        return 0 if argv and argv[0] in ("-h", "--help") else 2
    return COMMANDS[argv[0]](argv[1:])
