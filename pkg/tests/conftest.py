import helpers


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(helpers.ACCEPTANCE):
        status, detail = helpers.ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")
