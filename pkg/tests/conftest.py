import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record a one-line outcome for an acceptance criterion.

    Usage: ``criterion(number, ok, detail)``; the line is printed in the
    terminal summary whether or not output capture is on.
    """
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (ok, detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
