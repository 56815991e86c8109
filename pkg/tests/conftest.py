import pytest

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}
_N_CRITERIA = 10


def pytest_collection_modifyitems(config, items):
    config._acceptance_collected = any(item.fspath.basename == "test_acceptance.py" for item in items)


def pytest_terminal_summary(terminalreporter, config):
    if not getattr(config, "_acceptance_collected", False):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, _N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  no verdict (test errored or was deselected)")


@pytest.fixture
def verdict():
    """Record a criterion's outcome for the summary, then assert it."""

    def record(n, ok, detail):
        ok = bool(ok)
        ACCEPTANCE[n] = (ok, detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"

    return record
