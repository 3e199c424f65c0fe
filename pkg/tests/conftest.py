import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (criterion id, passed, summary) appended by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, text in sorted(ACCEPTANCE_LINES, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {text}")
