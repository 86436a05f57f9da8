import pytest

# criterion -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture
def verdict():
    def record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>3} {'PASS' if passed else 'FAIL'}  {detail}")
