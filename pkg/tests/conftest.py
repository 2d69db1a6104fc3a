"""Echo the acceptance pass/fail lines after the run, outside pytest's capture."""

import sys


def pytest_terminal_summary(terminalreporter):
    lines = []
    for name, module in sys.modules.items():
        if name.rpartition(".")[2] == "test_acceptance":
            lines = getattr(module, "RESULTS", [])
            break
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
