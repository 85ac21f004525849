import pytest

_GATE: list[str] = []


@pytest.fixture(scope="session")
def gate():
    """``gate(n, ok, detail)`` records one pass/fail line for an exit criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        _GATE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _GATE:
        terminalreporter.section("acceptance gate")
        for line in sorted(_GATE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
