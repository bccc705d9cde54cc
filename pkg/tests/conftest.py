"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion."""

from collections import defaultdict

import pytest

_titles: dict[int, str] = {}
_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    _titles[n] = title
    if rep.when == "call" or rep.failed:
        _outcomes[n].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_titles):
        results = _outcomes.get(n, [])
        status = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n} {status} {_titles[n]} ({len(results)} checks)")
