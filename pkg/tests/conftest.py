import _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _report.results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for criterion, ok, detail in _report.results:
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
