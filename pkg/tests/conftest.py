import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def record(request):
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    store = request.config.stash[ACCEPTANCE]

    def _record(criterion: int, passed: bool, detail: str) -> None:
        store[criterion] = (bool(passed), detail)
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash[ACCEPTANCE]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in range(1, 10):
        if criterion in store:
            passed, detail = store[criterion]
            terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")
        else:
            terminalreporter.write_line(f"criterion {criterion}: NOT RUN")
