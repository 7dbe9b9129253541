import pytest

from _helpers import tiny_config
from vlrefine.encoders import build_model

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(number)
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        if outcome == "FAIL" and hasattr(report, "wasxfail"):
            outcome = "FAIL (known, marked xfail)"
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "measured")
        if prev is None or prev[1] == "PASS":  # any failing test fails its criterion
            _criteria[number] = (title, outcome, detail or (prev[2] if prev else ""))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {outcome}: {title}" + (f" [{detail}]" if detail else ""))


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)
