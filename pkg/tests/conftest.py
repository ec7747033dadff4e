import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion(pytestconfig):
    """``criterion(n, ok, detail)`` records one pass/fail line and prints it at once."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
