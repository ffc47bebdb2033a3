import numpy as np
import pytest

from helixformer import tensor as T


@pytest.fixture(autouse=True)
def float64_default():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(module, rng, scale=0.3):
    """Move every parameter off its init point so ReLU kinks and zero biases don't coincide."""
    for p in module.parameters().values():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return module


# ---------------------------------------------------------------- acceptance report

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    status, details = item.config.stash[_CRITERIA].get(mark.args[0], ("PASS", []))
    if not rep.passed:
        status = "FAIL"
    details = details + [v for k, v in item.user_properties if k == "detail" and v not in details]
    item.config.stash[_CRITERIA][mark.args[0]] = (status, details)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, details = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {'; '.join(details)}")
