import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


class Verdicts:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append((criterion, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
        return bool(ok)


@pytest.fixture(scope="session")
def verdicts() -> Verdicts:
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
