import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = {}


def record(criterion, passed, detail):
    """Store the one-line verdict printed in the terminal summary."""
    ACCEPTANCE_LINES[criterion] = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
