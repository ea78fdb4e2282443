import pytest

# (criterion id, description, passed, detail) appended by the acceptance module
CRITERIA = []


@pytest.fixture
def record_criterion():
    def record(cid, text, passed, detail=""):
        CRITERIA.append((cid, text, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {text} {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, text, passed, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {cid}  {text}  {detail}".rstrip())
