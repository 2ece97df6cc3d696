"""Terminal reporting for the acceptance suite.

Each acceptance criterion lives in one test named test_criterion_NN_*; this
hook prints a single PASS/FAIL line per criterion after the run so the
acceptance status is readable without scrolling the full pytest output.
"""

import re

_ACCEPTANCE = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _PATTERN.search(report.nodeid)
    if m:
        _ACCEPTANCE[int(m.group(1))] = (m.group(2), report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        name, outcome = _ACCEPTANCE[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:02d} {name.replace('_', ' ')}: {status}"
        )
