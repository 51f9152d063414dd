import numpy as np
import pytest

from sgcldff.core import ExperimentConfig


@pytest.fixture
def small_cfg():
    return ExperimentConfig(image_size=64, base_channels=8, fusion_dim=16, fusion_cardinality=4,
                            window_size=2, batch_size=4, max_epochs=2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    from sgcldff.data import synth_generate

    root = tmp_path_factory.mktemp("synth")
    synth_generate(root, 20, 64, seed=5)
    return root
