"""Shared pytest plumbing for the suite.

The acceptance tests register one PASS/FAIL line per criterion here; the
terminal-summary hook prints them after capture ends so they appear in the
normal ``pytest -v`` output as well as with ``-s``.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
