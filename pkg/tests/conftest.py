import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one ``ACCEPTANCE <id>: PASS|FAIL <details>`` line, echoed in the terminal summary."""

    def record(cid: str, ok: bool, details: str) -> bool:
        line = f"ACCEPTANCE {cid}: {'PASS' if ok else 'FAIL'} {details}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
