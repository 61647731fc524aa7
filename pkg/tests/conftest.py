import pytest

_ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


class Ledger:
    def record(self, number: int, name: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(ok), name, detail)
        print(f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return Ledger()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, name, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
