"""Shared test configuration.

Collects the acceptance-criterion outcomes and prints one pass/fail
line per criterion at the end of the session.
"""

_ACCEPTANCE_RESULTS = {}


def record_acceptance(name, passed):
    _ACCEPTANCE_RESULTS[name] = passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(
            f"{'PASS' if passed else 'FAIL'}  {name}"
        )
