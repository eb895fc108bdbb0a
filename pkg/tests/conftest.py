import pytest

from epochstore.persist import Heap, HeapGeometry
from epochstore.runtime import EpochRuntime, make_strategy

SMALL = HeapGeometry(1 << 20, size_classes=(64, 256, 1024))


def sim_heap(geometry=SMALL, **opts):
    return Heap.create(None, geometry, "sim", **opts)


def runtime(heap=None, strategy="perepoch", **kw):
    heap = heap if heap is not None else sim_heap(track=True)
    return EpochRuntime(heap, make_strategy(strategy), **kw)


def advance_to(rt, epoch):
    while rt.epoch < epoch:
        rt.advance_epoch()


@pytest.fixture
def heap():
    return sim_heap(track=True)


@pytest.fixture
def rt(heap):
    return EpochRuntime(heap)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def acceptance_line(n: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
