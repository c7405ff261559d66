import time

import pytest

_RESULTS: list[tuple[int, str, bool, float, str]] = []


@pytest.fixture
def criterion():
    """Run one acceptance check, record a PASS/FAIL line and assert on it.

    ``body`` returns (ok, detail); exceeding ``limit_s`` also fails the criterion.
    """
    def run(number: int, title: str, limit_s: float | None, body):
        t0 = time.perf_counter()
        try:
            ok, detail = body()
        except AssertionError as exc:
            ok, detail = False, f"assertion: {exc}".splitlines()[0]
        elapsed = time.perf_counter() - t0
        if limit_s is not None and elapsed > limit_s:
            ok, detail = False, f"{detail}; runtime {elapsed:.1f}s exceeds {limit_s:.0f}s"
        _RESULTS.append((number, title, ok, elapsed, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail} ({elapsed:.1f}s)")
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, elapsed, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:2d}  {title}: {detail} ({elapsed:.1f}s)")
