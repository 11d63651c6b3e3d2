"""Per-criterion pass/fail lines for the acceptance suite.

Tests marked ``criterion(k)`` are grouped; a criterion passes when every
test in its group passes. Details recorded with ``record_property("detail",
...)`` are echoed next to the verdict.
"""
from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_details = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    k = props.get("criterion")
    if k is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[k].append(report.outcome)
    if report.when == "call":
        for name, value in report.user_properties:
            if name == "detail":
                _details[k].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_outcomes):
        ok = all(o == "passed" for o in _outcomes[k])
        detail = "; ".join(_details[k])
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else ""))
