import pytest

_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line, then assert it."""
    def report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
