import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, passed, detail)`` records one acceptance line."""
    def record(n, title, passed, detail=""):
        _CRITERIA[n] = (title, bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
