from __future__ import annotations

import pytest

_RESULTS: dict[int, str] = {}


class Criterion:
    """Records one acceptance criterion's verdict for the end-of-run summary."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def __enter__(self) -> "Criterion":
        _RESULTS[self.number] = f"criterion {self.number} FAIL: {self.title}"
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            _RESULTS[self.number] = f"criterion {self.number} PASS: {self.title}"
        else:
            _RESULTS[self.number] = f"criterion {self.number} FAIL: {self.title} ({exc_type.__name__}: {exc})"
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
