import pytest

_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the test still asserts on its own."""

    def record(ok: bool, detail: str):
        _VERDICTS.append((request.node.name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
