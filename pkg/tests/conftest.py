import _report


def pytest_terminal_summary(terminalreporter):
    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_report.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
