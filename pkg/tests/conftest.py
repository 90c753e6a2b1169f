import numpy as np
import pytest

from dualseg.datagen import generate_dataset, load_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six short videos (2 train / 1 val / 3 test) at 64x96."""
    root = tmp_path_factory.mktemp("data") / "ds"
    generate_dataset(root, split=(2, 1, 3), n_frames=6, seed=3)
    return root


@pytest.fixture(scope="session")
def small_splits(small_dataset):
    return {s: load_split(small_dataset, s) for s in ("train", "val", "test")}
