_RESULTS = {}


def record(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    _RESULTS[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[k])
