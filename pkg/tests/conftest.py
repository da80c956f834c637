import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion gate")


@pytest.fixture
def detail(request):
    """Free-text evidence for the acceptance summary line of the running test."""
    notes: list[str] = []
    request.node.user_properties.append(("detail", notes))
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    notes = next((v for k, v in item.user_properties if k == "detail"), [])
    status = "PASS" if report.passed else "FAIL"
    _results[number] = (status, title, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, notes = _results[number]
        line = f"CRITERION {number} {status}: {title}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
