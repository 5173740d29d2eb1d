"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest
from hypothesis import settings

# shared CPU in CI makes per-example timing meaningless
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_RESULTS = {}
_NOTES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        prev = _RESULTS.get(number, (title, True))[1]
        _RESULTS[number] = (title, prev and not failed)


@pytest.fixture
def acceptance_note():
    """Lets an acceptance test attach a line (measured value, runtime) to the summary."""
    return _NOTES.append


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
    for note in _NOTES:
        terminalreporter.write_line(note)
