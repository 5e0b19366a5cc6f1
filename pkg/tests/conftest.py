import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record the verdict of one acceptance criterion: ``criterion(n, ok, detail)``."""
    results = request.config.stash[_RESULTS]

    def record(n, ok, detail="", gating=True):
        results[n] = (bool(ok), detail, gating)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail, gating = results[n]
        tag = "PASS" if ok else "FAIL"
        soft = "" if gating else " (soft, non-gating)"
        terminalreporter.write_line(f"criterion {n:2d}: {tag}{soft}  {detail}")
