import pytest

_LINES: dict[int, str] = {}


class Verdicts:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
