import pytest

_LINES = []


@pytest.fixture
def record():
    """Collect one ``PASS``/``FAIL`` line per acceptance criterion."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        line = "criterion %2d %s: %s" % (number, "PASS" if ok else "FAIL", detail)
        _LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
