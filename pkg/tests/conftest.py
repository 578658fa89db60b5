import _support


def pytest_terminal_summary(terminalreporter):
    if _support.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _support.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
