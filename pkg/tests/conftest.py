"""Per-criterion pass/fail report for the acceptance suite."""
from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or report.outcome != "passed":
        num = int(m.group(1))
        prev = _results.get(num)
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        if report.outcome == "skipped":
            outcome = "SKIP"
        if prev is None or prev[0] == "PASS":
            _results[num] = (outcome, m.group(2).replace("_", " "), report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, 11):
        if num in _results:
            outcome, name, secs = _results[num]
            terminalreporter.write_line(f"criterion {num:2d}: {outcome}  {name} ({secs:.1f} s)")
        else:
            terminalreporter.write_line(f"criterion {num:2d}: not run")
