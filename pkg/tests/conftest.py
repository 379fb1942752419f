import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one PASS/FAIL line each at the end of the run
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        status, detail = ACCEPTANCE.get(n, ("FAIL", "not run or errored before reporting"))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
