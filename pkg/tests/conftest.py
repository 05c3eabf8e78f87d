"""Collect acceptance outcomes and print one PASS/FAIL line per criterion."""

import pytest

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.fixture
def measured(request):
    """Dict the test fills with the numbers it measured; shown in the summary."""
    marker = request.node.get_closest_marker("criterion")
    details: dict = {}
    if marker is not None:
        _RESULTS.setdefault(marker.args[0], {"outcome": "not run", "details": details})["details"] = details
    return details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _RESULTS.setdefault(marker.args[0], {"outcome": "not run", "details": {}})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _RESULTS.items():
        details = ", ".join(f"{k}={_fmt(v)}" for k, v in entry["details"].items())
        line = f"{entry['outcome']:<4} {name}"
        terminalreporter.write_line(f"{line}  [{details}]" if details else line)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
