import numpy as np
import pytest

from gazehoi import kernels


@pytest.fixture(params=sorted(kernels.backends()))
def kernel_backend(request, monkeypatch):
    """Run a test once per importable kernel backend."""
    mod = kernels.backends()[request.param]
    for name in ("lap_solve", "pairwise_iou", "match_ranked", "all_point_ap"):
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    ok = rep.passed and _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}")
