import re

import pytest

_details: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Records the measured numbers behind an acceptance criterion for the summary."""
    def record(number: int, detail: str):
        _details[number] = detail
        print(f"criterion {number}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or outcome == "error"):
                rows[int(m.group(1))] = "PASS" if outcome == "passed" else "FAIL"
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        terminalreporter.write_line(f"criterion {n:>2}: {rows[n]}  {_details.get(n, '')}".rstrip())
