import pytest

_REPORT = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request, pytestconfig):
    """Collects ``(criterion, passed, detail)`` lines for the end-of-run summary."""
    return pytestconfig.stash.setdefault(_REPORT, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(lines, key=lambda t: str(t[0])):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
