import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from verdicts import LINES  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" or not rep.failed:
        return
    n = mark.args[0]
    if not any(line.startswith(f"CRITERION {n:2d} ") for line in LINES):
        LINES.append(f"CRITERION {n:2d} FAIL: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
