import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the terminal summary prints them in order."""
    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
