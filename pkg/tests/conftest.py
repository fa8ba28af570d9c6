from __future__ import annotations

from pathlib import Path

import pytest

from macomm.core import Dataset, TaskInstance

FIXTURES = Path(__file__).resolve().parent / "fixtures"

# criterion number -> (title, passed); filled in by test_acceptance
CRITERIA: dict[int, tuple[str, bool]] = {}


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def math_task() -> TaskInstance:
    return TaskInstance("gsm8k_000", Dataset.GSM8K, "Compute 33 * 7 - 94.", "137")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}: {title}")
