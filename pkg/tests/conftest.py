"""Pass/fail bookkeeping for the acceptance criteria.

Tests tagged ``@pytest.mark.criterion("A3")`` feed one summary line per
criterion, printed at the end of the session.  Tests may attach numbers to
the line through the ``report`` fixture.
"""
from __future__ import annotations

import pytest

CRITERIA = [f"A{k}" for k in range(1, 11)]
_outcomes: dict[str, list] = {}
_details: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion checked by the test")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args[0] if mark else None


@pytest.fixture
def report(request):
    """Callable ``report(text)`` that appends to the criterion summary line."""
    cid = _criterion(request.node)

    def add(text: str):
        _details.setdefault(cid, []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    cid = _criterion(item)
    if cid is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(cid, []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in CRITERIA:
        results = _outcomes.get(cid)
        if not results:
            tr.write_line(f"{cid} NOT RUN")
            continue
        ok = all(p for _, p in results)
        failed = [n for n, p in results if not p]
        line = f"{cid} {'PASS' if ok else 'FAIL'}"
        if _details.get(cid):
            line += "  " + "; ".join(_details[cid])
        if failed:
            line += "  [failed: " + ", ".join(failed) + "]"
        tr.write_line(line)
