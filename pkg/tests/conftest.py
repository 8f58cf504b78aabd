import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, title, passed, detail)``."""
    lines = request.config.stash[_VERDICTS]

    def record(number, title, passed, detail=""):
        line = f"[{number}] {title}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
