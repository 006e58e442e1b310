import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Record one acceptance line ``criterion N: PASS|FAIL detail`` and return the flag."""

    def _record(number, name, passed, detail=""):
        line = f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
