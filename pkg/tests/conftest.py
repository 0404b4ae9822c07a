import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: list[tuple[str, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed_setup = report.when == "setup" and not report.passed
    if report.when == "call" or failed_setup:
        measured = dict(item.user_properties).get("measured", "")
        _CRITERIA.append((marker.args[0], "PASS" if report.passed else "FAIL", marker.args[1], measured))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, text, measured in sorted(_CRITERIA, key=lambda r: r[0]):
        line = f"{status} [{label}] {text}"
        terminalreporter.write_line(line + (f" | {measured}" if measured else ""))
