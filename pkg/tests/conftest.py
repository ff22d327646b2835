import pytest

_outcomes: dict[int, list[bool]] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker, []).append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


@pytest.fixture
def report(request):
    """Attach a one-line summary to the current criterion's verdict line."""
    num = request.node.get_closest_marker("criterion").args[0]

    def add(text: str) -> None:
        _details.setdefault(num, []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        verdict = "PASS" if all(_outcomes[num]) else "FAIL"
        extra = "; ".join(_details.get(num, []))
        terminalreporter.write_line(f"criterion {num}: {verdict}" + (f"  ({extra})" if extra else ""))
