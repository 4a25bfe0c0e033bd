import pytest

# acceptance verdicts, filled by tests/test_acceptance.py
VERDICTS: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    VERDICTS.setdefault(criterion, []).append((bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        parts = VERDICTS[n]
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: "
                                    + "; ".join(d for _, d in parts))
