import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Collect one verdict line per acceptance check; printed in the terminal summary."""

    def add(name: str, ok: bool, detail: str) -> bool:
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
