"""Shared pytest wiring: acceptance criterion reporting.

Tests marked @pytest.mark.criterion("...") get one [PASS]/[FAIL] line
per criterion in the terminal summary so the acceptance status is
readable at a glance.
"""

import pytest

_criteria_by_node: dict[str, str] = {}
_order: list[str] = []
_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(name): acceptance criterion reported in the terminal summary"
    )


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            label = str(marker.args[0])
            _criteria_by_node[item.nodeid] = label
            if label not in _order:
                _order.append(label)


def pytest_runtest_logreport(report):
    label = _criteria_by_node.get(report.nodeid)
    if label is None:
        return
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        # Never upgrade a FAIL (parametrized criteria share one label).
        if _outcomes.get(label) != "FAIL":
            _outcomes[label] = outcome
    elif report.failed:
        _outcomes[label] = "FAIL"
    elif report.when == "setup" and report.skipped and _outcomes.get(label) != "FAIL":
        _outcomes.setdefault(label, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _order or not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for label in _order:
        outcome = _outcomes.get(label, "FAIL")
        terminalreporter.write_line(f"[{outcome}] {label}")
