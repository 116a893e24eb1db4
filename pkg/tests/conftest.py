import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; the terminal summary prints them all."""
    def _record(criterion, passed, detail=""):
        _ACCEPTANCE.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
