import pytest

CRITERIA = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record and print one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(CRITERIA, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
