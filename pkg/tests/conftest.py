import pytest

_LINES: list[str] = []


@pytest.fixture
def record(capsys):
    """Print one acceptance line immediately and keep it for the summary."""

    def emit(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
