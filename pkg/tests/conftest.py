import _helpers


def pytest_terminal_summary(terminalreporter):
    if not _helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_helpers.ACCEPTANCE):
        terminalreporter.write_line(line)
