"""Shared pytest wiring for the acceptance gate.

Tests marked ``@pytest.mark.criterion(n)`` get their outcome echoed as a
``CRITERION n: PASS/FAIL`` line in the terminal summary, so the
acceptance status is readable without scanning the whole run.
"""

import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(n): acceptance-criterion test; outcome is echoed as a "
        "'CRITERION n: PASS/FAIL' line after the run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call":
        _results[n] = _results.get(n, True) and report.passed
    elif report.failed or report.skipped:
        # A criterion whose test errored in setup/teardown or was skipped
        # has not been demonstrated.
        _results[n] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        verdict = "PASS" if _results[n] else "FAIL"
        terminalreporter.write_line(f"CRITERION {n}: {verdict}")
