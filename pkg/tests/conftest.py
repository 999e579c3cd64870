import pytest

_LINES = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""

    def record(k, ok, detail):
        line = f"CRITERION {k:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line, flush=True)
        _LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
