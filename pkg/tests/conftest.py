import numpy as np
import pytest

from paddyforge.data import gen_synthetic_dataset, load_image_dataset, stratified_split
from paddyforge.tensor import Shape2D

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    key = (marker.args[0], marker.args[1])
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        prev, notes = _ACCEPTANCE.get(key, ("PASS", []))
        status = "PASS" if (prev == "PASS" and rep.outcome == "passed") else "FAIL"
        notes = notes + [str(v) for k, v in item.user_properties if k == "measured"]
        _ACCEPTANCE[key] = (status, notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (status, notes) in sorted(_ACCEPTANCE.items()):
        detail = f" [{'; '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"criterion {num:>2} {status}: {title}{detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The acceptance dataset: 4 classes x 250 images at 32x32, seed 1."""
    root = tmp_path_factory.mktemp("synth4")
    gen_synthetic_dataset(root, classes=4, per_class=250, size=Shape2D(32, 32), seed=1)
    return root


@pytest.fixture(scope="session")
def synth_split(synth_root):
    return stratified_split(load_image_dataset(synth_root), 0.2, seed=1)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    gen_synthetic_dataset(root, classes=3, per_class=12, size=Shape2D(16, 16), seed=3)
    return root


@pytest.fixture(scope="session")
def small_ds(small_root):
    return load_image_dataset(small_root)
