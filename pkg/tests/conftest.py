import acceptance_setup


def pytest_terminal_summary(terminalreporter):
    if not acceptance_setup.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_setup.RESULTS):
        terminalreporter.write_line(acceptance_setup.RESULTS[n])
