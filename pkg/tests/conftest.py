import numpy as np
import pytest

from plaindetr import numerics as nx


@pytest.fixture(autouse=True)
def _debug_numerics():
    # non-finite checks on by default in tests
    with nx.debug_checks(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[num])
