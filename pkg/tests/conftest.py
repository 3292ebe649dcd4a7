import contextlib
import time

import numpy as np
import pytest

# (number, title, passed, detail) for the acceptance summary block
CRITERIA: list = []


@contextlib.contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    """Record one acceptance criterion; the block fails if it raises or runs over budget."""
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        CRITERIA.append((number, title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''} ({elapsed:.1f}s)"))
        raise
    elapsed = time.perf_counter() - start
    ok = budget is None or elapsed < budget
    limit = f" < {budget:g}s" if budget is not None else ""
    CRITERIA.append((number, title, ok, f"{info['detail']} ({elapsed:.1f}s{limit})".strip()))
    assert ok, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
