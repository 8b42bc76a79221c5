"""Shared pytest plumbing: the acceptance tests register one line per
criterion here, and the terminal summary echoes them even when stdout
capture is on."""

CRITERION_LINES = []


def record_criterion(number, ok, detail):
    status = "PASS" if ok else "FAIL"
    line = f"criterion {number}: {status} — {detail}"
    CRITERION_LINES.append((number, line))
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(CRITERION_LINES):
        terminalreporter.write_line(line)
