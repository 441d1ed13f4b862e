import pytest

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or report.failed or report.skipped:
        previous = _criteria.get(number, (title, "passed"))[1]
        status = report.outcome if previous == "passed" else previous
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(status, status.upper())
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
