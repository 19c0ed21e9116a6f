from __future__ import annotations

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion and return the verdict."""

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
