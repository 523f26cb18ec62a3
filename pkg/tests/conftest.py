import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(acceptance_report.LINES, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(acceptance_report.LINES[key])
