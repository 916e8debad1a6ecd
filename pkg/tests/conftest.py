"""Collects the one-line verdicts of the acceptance suite and prints them last."""

VERDICTS = {}


def record_verdict(number, passed, detail):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
    VERDICTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
