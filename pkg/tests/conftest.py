import pytest

_ACCEPTANCE: list[tuple[str, str, bool, str]] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects (id, title, passed, detail) for the end-of-run acceptance summary."""

    def record(cid: str, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((cid, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {cid} {title}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {cid:<4} {title} -- {detail}")
