import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str = ""):
    """Store one acceptance outcome and echo it."""
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append((name, bool(ok), detail))
    print(line)
    return ok


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
