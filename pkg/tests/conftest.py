import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {detail}"
        print(line)
        request.config.stash[_LINES].append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
