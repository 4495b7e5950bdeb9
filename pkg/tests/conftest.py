import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record a one-line PASS/FAIL verdict per acceptance criterion."""

    def record(key: str, ok: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        terminalreporter.write_line(_VERDICTS[key])
