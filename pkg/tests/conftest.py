import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def report():
    """Record one ``criterion N: PASS/FAIL detail`` line; returns the pass flag."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[criterion] = line
        print(line)
        return passed

    return record


def _criterion_key(name: str):
    digits = "".join(ch for ch in name if ch.isdigit())
    return int(digits or 0), name


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(_ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(_ACCEPTANCE_LINES[name])
