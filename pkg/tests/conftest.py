"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> None:
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
