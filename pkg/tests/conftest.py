import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record ``criterion N: <name> ... PASS|FAIL`` and assert on it."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {name}: {detail} {'PASS' if ok else 'FAIL'}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
