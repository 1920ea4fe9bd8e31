import numpy as np
import pytest

_ACCEPTANCE: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): exit criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        previous = _ACCEPTANCE.get(name, "PASS")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE[name] = "FAIL" if "FAIL" in (previous, status) else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split(".")[0])):
        terminalreporter.write_line(f"[{_ACCEPTANCE[name]}] {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
