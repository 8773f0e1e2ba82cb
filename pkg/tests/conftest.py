import numpy as np
import pytest

from twostage import Frame

# one line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES: list[str] = []


def scalar_frame(subtotals) -> Frame:
    """Frame of single-SSU PSUs whose subtotals are the given values."""
    values = np.asarray(subtotals, dtype=np.float64)[:, None]
    return Frame(values, np.ones(values.shape[0], dtype=np.int64))


@pytest.fixture
def frame_1to5() -> Frame:
    return scalar_frame([1.0, 2.0, 3.0, 4.0, 5.0])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
