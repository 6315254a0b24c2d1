import pytest

# (criterion, passed, detail) rows filled in by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; call with (passed, detail) before asserting."""
    name = request.node.name.removeprefix("test_")

    def record(passed, detail):
        ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
