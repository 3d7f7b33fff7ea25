import numpy as np
import pytest

from lds_reid.data import ToyConfig, generate_toy_dataset


@pytest.fixture(scope="session")
def small_toy():
    cfg = ToyConfig(num_identities=8, images_per_identity=10, height=32, width=16)
    return generate_toy_dataset(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=64, w=32):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA.append((marker.args[0], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _CRITERIA:
        status = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"{status}  {name}")
