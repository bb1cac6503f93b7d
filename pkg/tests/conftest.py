import pytest

_VERDICTS = pytest.StashKey[dict]()
N_CRITERIA = 12


@pytest.fixture
def verdict(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, ok: bool, detail: str):
        store.setdefault(n, []).append((bool(ok), request.node.name, detail))
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, None)
    if not store:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        parts = store.get(n)
        if not parts:
            tr.write_line(f"criterion {n:2d}: NOT RUN (no verdict recorded; the test errored or was deselected)")
            continue
        status = "PASS" if all(ok for ok, _, _ in parts) else "FAIL"
        detail = "; ".join(f"{d}{'' if ok else ' [failed]'}" for ok, _, d in parts)
        tr.write_line(f"criterion {n:2d}: {status}  {detail}")
