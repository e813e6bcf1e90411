import sys
from pathlib import Path

import pytest

# shared helpers such as _fd.py live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "detail": "", "ran": False})
    if report.failed:
        entry["passed"] = False
        if call.excinfo is not None:
            entry["detail"] = entry["detail"] or str(call.excinfo.value).splitlines()[0][:160]
    if report.when == "call":
        entry["ran"] = True
        for key, value in item.user_properties:
            if key == "detail":
                entry["detail"] = value if report.passed else f"{value}; {entry['detail']}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {e['title']}: {e['detail']}")
