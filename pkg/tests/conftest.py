import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def record_criterion(request):
    """Store a PASS/FAIL line for an acceptance criterion; all lines are echoed at the end of the run."""
    def record(number, ok, detail, table=None):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        if table:
            print(table)
        request.config.stash[_CRITERIA][number] = (line, table)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    criteria = config.stash.get(_CRITERIA, {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        line, table = criteria[number]
        terminalreporter.write_line(line)
        if table:
            for row in table.split("\n"):
                terminalreporter.write_line("    " + row)
