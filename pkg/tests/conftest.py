import numpy as np
import pytest

from fedsim.model import LabeledDataset, classifier_layout, init_params
from fedsim.partition import DENTAL_CLASS_WEIGHTS, synth_dataset


@pytest.fixture
def fixture20():
    """20 samples, 3-dim features, 4 classes."""
    rng = np.random.default_rng(1234)
    X = rng.normal(size=(20, 3))
    y = rng.integers(0, 4, size=20)
    return LabeledDataset(X, y, 4)


@pytest.fixture
def params20(fixture20):
    return init_params(classifier_layout(3, 4), seed=99, scale=0.5)


@pytest.fixture(scope="session")
def standard_data():
    """The default desk-scale fixture: 2000 samples, dental class mix."""
    return synth_dataset(2000, 4, DENTAL_CLASS_WEIGHTS, seed=11)


@pytest.fixture(scope="session")
def standard_eval():
    return synth_dataset(500, 4, DENTAL_CLASS_WEIGHTS, seed=12)


# --- acceptance criteria reporting ---------------------------------------------

_criteria: dict[str, str] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if call.when == "call" or call.excinfo is not None:
        failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
        if failed or name not in _criteria:
            _criteria[name] = "FAIL" if failed else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria.items():
        terminalreporter.write_line(f"{status}  {name}")
