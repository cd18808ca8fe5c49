import os

import pytest

from acceptance_log import RESULTS


def pytest_collection_modifyitems(config, items):
    # the desk-scale sweep is opt-in: it trains 25 models at full length
    if os.environ.get("LESIONSEG_RUN_SLOW"):
        return
    skip = pytest.mark.skip(reason="set LESIONSEG_RUN_SLOW=1 to run the desk-scale sweep")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
