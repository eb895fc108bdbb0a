import csv
import io
import os
from pathlib import Path

import pytest

from epochstore import cli
from epochstore.bench import (CSV_COLUMNS, RECOVERY_COLUMNS, BenchConfig, graph_from_file,
                              parse_flags, populate_map_heap, run_bench, run_recovery_bench,
                              write_rows)
from epochstore.errors import ConfigError
from epochstore.structures import write_edge_binary, write_edge_text

GOLDEN = Path(__file__).parent / "golden" / "bench_header.csv"
TINY = dict(key_range=500, buckets=256, value_bytes=32)


def test_defaults():
    [cfg] = parse_flags([])
    assert (cfg.structure, cfg.mix, cfg.strategy, cfg.epoch_ms) == ("map", "2:1:1", "perepoch", 50.0)
    assert (cfg.value_bytes, cfg.key_range, cfg.buckets, cfg.seconds) == (1024, 100_000, 1 << 17, 5.0)
    assert cfg.backend == "sim" and cfg.threads == 1


def test_read_dominant_mix():
    [cfg] = parse_flags(["--mix", "18:1:1"])
    assert cfg.ratios() == (18.0, 1.0, 1.0)


@pytest.mark.parametrize("argv", [["--threads", "0"], ["--mix", "1:1"], ["--strategy", "lazy"],
                                  ["--structure", "tree"], ["--epoch-ms", "0"], ["--mix", "a:b:c"]])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        parse_flags(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_sweep_expands():
    cfgs = parse_flags(["--epoch-ms", "1,10,100,1000", "--strategy", "buffered"])
    assert [c.epoch_ms for c in cfgs] == [1, 10, 100, 1000]


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig("queue", mix="1:-1").validate()
    assert BenchConfig("graph").mix == "10:5:10:1"


def test_csv_header_golden():
    buf = io.StringIO()
    write_rows([], buf)
    assert buf.getvalue() == GOLDEN.read_text()
    assert ",".join(CSV_COLUMNS) + "\n" == GOLDEN.read_text()


def test_map_bench_row_and_fence_relation():
    res = run_bench(BenchConfig("map", threads=4, seconds=1.0, epoch_ms=10, **TINY))
    row = res.row
    assert list(row) == list(CSV_COLUMNS)
    assert row["ops_per_sec"] > 0 and row["ops"] > 0
    assert abs(row["fences"] - row["epochs_elapsed"]) <= 1
    assert row["epochs_elapsed"] >= 1


def test_queue_bench_fifo_audit():
    res = run_bench(BenchConfig("queue", threads=1, ops=3000, epoch_ms=5, **TINY))
    assert res.audit_ok, res.audit_detail
    assert res.row["ops"] == 3000


def test_graph_bench_runs():
    res = run_bench(BenchConfig("graph", threads=2, ops=2000, epoch_ms=5, key_range=100,
                                buckets=16, value_bytes=16))
    assert res.row["ops"] == 2000


def test_direct_writes_back_per_mutation():
    # every insert either stamps a new payload or tombstones the unused one
    res = run_bench(BenchConfig("map", mix="0:1:0", strategy="direct", ops=500, epoch_ms=20,
                                key_range=10_000, buckets=256, value_bytes=32))
    assert res.row["writes_back"] >= 500


def test_buffered_writes_back_fall_with_epoch_length():
    per_op = []
    for ms in (1, 10, 100, 1000):
        row = run_bench(BenchConfig("map", strategy="buffered", epoch_ms=ms, seconds=1.0,
                                    key_range=2000, buckets=1024, value_bytes=64)).row
        per_op.append(row["writes_back"] / row["ops"])
    # timing-dependent; allow 5% slack between neighbours
    assert all(b <= a * 1.05 for a, b in zip(per_op, per_op[1:])), per_op
    assert per_op[-1] < per_op[0]


def test_real_backend_bench():
    res = run_bench(BenchConfig("map", backend="real", seconds=0.3, epoch_ms=10, **TINY))
    assert res.row["backend"] == "real"
    assert res.row["epochs_elapsed"] >= 1 and abs(res.row["fences"] - res.row["epochs_elapsed"]) <= 1


# -- recovery bench -------------------------------------------------------------

def test_recovery_bench_empty_heap(tmp_path):
    path = tmp_path / "m.heap"
    populate_map_heap(path, 0, value_bytes=64, buckets=64)
    rows = run_recovery_bench(path, (1, 2), value_bytes=64, buckets=64, repeats=1)
    assert [r["payloads"] for r in rows] == [0, 0]
    assert all(r["seconds"] < 1.0 for r in rows)
    assert list(rows[0]) == list(RECOVERY_COLUMNS)


def test_recovery_bench_counts(tmp_path):
    path = tmp_path / "m.heap"
    populate_map_heap(path, 3000, value_bytes=64, buckets=256)
    rows = run_recovery_bench(path, (1, 4), value_bytes=64, buckets=256, repeats=1)
    assert [r["payloads"] for r in rows] == [3000, 3000]


def test_recovery_bench_missing_heap(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_recovery_bench(tmp_path / "nope")


@pytest.mark.parametrize("fmt", ["txt", "bin"])
def test_graph_from_file(tmp_path, fmt):
    edges = [(i, (i * 7 + 3) % 50, b"") for i in range(50)] + [(1, 2, b"")]
    edges = list(dict(((s, d), (s, d, a)) for s, d, a in edges).values())
    path = tmp_path / f"g.{fmt}"
    (write_edge_text if fmt == "txt" else write_edge_binary)(path, edges)
    for backend in ("sim", "real"):
        got, want, issues = graph_from_file(path, k=3, backend=backend, workdir=tmp_path)
        assert got == want and issues == []
        assert len(want[1]) == len(edges)


# -- CLI --------------------------------------------------------------------------

def test_cli_bench(tmp_path):
    out = tmp_path / "b.csv"
    rc = cli.main(["bench", "--structure", "queue", "--ops", "300", "--key-range", "100",
                   "--value-bytes", "16", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and rows[0]["structure"] == "queue"


def test_cli_recovery(tmp_path, capsys):
    rc = cli.main(["recovery", "--payloads", "200", "--value-bytes", "32", "--buckets", "64",
                   "--k", "1,2", "--repeats", "1"])
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["k"] for r in rows] == ["1", "2"] and rows[0]["payloads"] == "200"


def test_cli_crashcheck(tmp_path, capsys):
    j = tmp_path / "r.jsonl"
    rc = cli.main(["crashcheck", "--structure", "queue", "--crash-points", "10", "--threads", "2",
                   "--jsonl", str(j)])
    assert rc == 0
    assert "failures=0" in capsys.readouterr().out
    assert len(j.read_text().splitlines()) >= 10


def test_cli_usage(capsys):
    assert cli.main([]) == 2
    assert cli.main(["--help"]) == 0
    with pytest.raises(SystemExit):
        cli.main(["recovery"])


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "epochstore", "--help"], capture_output=True,
                       text=True, env={**os.environ})
    assert r.returncode == 0 and "crashcheck" in r.stdout
