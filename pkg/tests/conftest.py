import numpy as np
import pytest

_ACCEPTANCE = []


def record_acceptance(number, passed, detail):
    """Store and print one acceptance line; the session summary repeats them."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
