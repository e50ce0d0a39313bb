import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from viewforge.container import pack_dataset
from viewforge.toydata import make_random_images, make_toy_class_dataset


@pytest.fixture(scope="session")
def small_raw_dataset(tmp_path_factory):
    """100 random 24x24 RGB images packed RAW."""
    path = tmp_path_factory.mktemp("data") / "small.sslp"
    records = make_random_images(100, height=24, width=24, seed=42)
    pack_dataset(records, path)
    return path, records


@pytest.fixture(scope="session")
def toy_class_dataset(tmp_path_factory):
    """Synthetic 4-class color dataset for training tests."""
    path = tmp_path_factory.mktemp("data") / "toy.sslp"
    records = make_toy_class_dataset(2048, image_size=16, seed=7)
    pack_dataset(records, path)
    return path, records


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
