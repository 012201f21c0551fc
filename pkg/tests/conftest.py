"""Shared fixtures and the acceptance summary.

Tests marked ``@pytest.mark.criterion("name")`` are acceptance criteria. Their
outcome (and any ``record_property("detail", ...)`` text) is printed as one
PASS/FAIL line per criterion at the end of the run.
"""

import numpy as np
import pytest

_CRITERIA: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    entry = _CRITERIA.setdefault(name, {"ok": True, "seconds": 0.0, "details": [], "ran": False})
    if report.when in ("setup", "call"):
        # fixture work (e.g. a shared training run) is counted against the criterion
        entry["seconds"] += report.duration
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["ran"] = True
        if not report.passed:
            entry["ok"] = False
        for key, value in item.user_properties:
            if key == "detail":
                entry["details"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _CRITERIA.items():
        if not entry["ran"]:
            continue
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        line = f"{status}  {name}  ({entry['seconds']:.1f} s)"
        terminalreporter.write_line(line + (f"  {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
