import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def a1():
    from pal_loco.morphology import reference_robot

    return reference_robot(1)


# ---------------------------------------------------------------------------
# acceptance summary: one line per numbered criterion

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or rep.outcome != "passed":
        prev = _CRITERIA.get(n, (title, "PASS"))[1]
        status = "PASS" if rep.outcome == "passed" and prev == "PASS" else (
            "SKIP" if rep.outcome == "skipped" else "FAIL")
        _CRITERIA[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} [{status}] {title}")
