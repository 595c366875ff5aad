"""Acceptance bookkeeping: tests marked ``criterion(n)`` get a one-line verdict
in the terminal summary. A criterion passes only if all of its tests pass."""

import pytest

_verdicts: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n = mark.args[0]
    ok, notes = _verdicts.get(n, (True, []))
    ok = ok and rep.passed
    notes = notes + [v for k, v in item.user_properties if k == "detail" and v not in notes]
    _verdicts[n] = (ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, notes = _verdicts[n]
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += "  (" + "; ".join(notes) + ")"
        terminalreporter.write_line(line)
