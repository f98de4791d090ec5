import numpy as np
import pytest

from poisonbench.core import ArtifactStore, DatasetRef
from poisonbench.data import from_arrays, make_synthetic
from poisonbench.features import SimilarityTable
from poisonbench.triggers import badnets_trigger, blended_trigger


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "store")


@pytest.fixture(scope="session")
def small_train():
    return make_synthetic(200, num_classes=4, split="train", seed=3, shape=(3, 16, 16))


@pytest.fixture(scope="session")
def small_test():
    return make_synthetic(80, num_classes=4, split="test", seed=3, shape=(3, 16, 16))


def table_from_values(values, trigger=None, ref=None):
    values = np.asarray(values, dtype=np.float64)
    ref = ref if ref is not None else DatasetRef("synthetic", "train", 10, len(values), "values")
    trig = trigger if trigger is not None else badnets_trigger((3, 8, 8))
    return SimilarityTable(ref, trig, "fixed", values)


def ten_sample_fixture():
    """Ten 1x4x4 images, labels 0..4 twice; image i is filled with i/10."""
    images = np.stack([np.full((1, 4, 4), i / 10, dtype=np.float32) for i in range(10)])
    labels = np.array([0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
    return from_arrays(images, labels, num_classes=5, split="test")


@pytest.fixture
def blend_zero():
    return blended_trigger((3, 16, 16), 0.0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
