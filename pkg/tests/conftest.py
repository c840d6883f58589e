import numpy as np
import pytest

from trifuse.synthetic import make_mini_cityscapes, make_mini_kitti


@pytest.fixture(scope="session")
def mini_kitti(tmp_path_factory):
    root = tmp_path_factory.mktemp("kitti")
    ids = make_mini_kitti(root, frames=5, image_size=(192, 64), seed=0)
    return root, ids


@pytest.fixture(scope="session")
def mini_cityscapes(tmp_path_factory):
    root = tmp_path_factory.mktemp("cityscapes")
    ids = make_mini_cityscapes(root, seed=0)
    return root, ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
