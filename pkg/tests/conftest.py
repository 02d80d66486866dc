import pytest

ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; a summary line per criterion is printed at the end."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
