"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import contextlib
import time

import pytest

VERDICTS = {}


@contextlib.contextmanager
def _criterion(number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        VERDICTS[number] = ("FAIL", title, time.perf_counter() - start, f"{type(exc).__name__}: {exc}")
        raise
    VERDICTS[number] = ("PASS", title, time.perf_counter() - start, "")


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS, key=lambda n: (int(str(n).split("-")[0]), str(n))):
        verdict, title, seconds, detail = VERDICTS[number]
        first = detail.splitlines()[0] if detail else ""
        line = f"{verdict} criterion {number}: {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f" -- {first}" if first else ""))
