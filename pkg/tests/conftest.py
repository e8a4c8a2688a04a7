"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    def record(name, passed, detail):
        line = f"ACCEPTANCE {'PASS' if passed else 'FAIL'} {name}: {detail}"
        VERDICTS.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
