"""Prints one PASS/FAIL line per numbered acceptance check after each run."""

import re

CRITERION_RE = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid:
                continue
            m = CRITERION_RE.search(rep.nodeid)
            if m is None:
                continue
            number, name = int(m.group(1)), m.group(2)
            status = "PASS" if outcome == "passed" else "FAIL"
            # a setup error plus no call record still counts as a failure
            if number not in rows or status == "FAIL":
                rows[number] = (status, name)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(rows):
        status, name = rows[number]
        terminalreporter.write_line(
            f"criterion {number}: {status} ({name.replace('_', ' ')})")
