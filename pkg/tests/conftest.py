import numpy as np
import pytest

from toolselect.simworld import WorldConfig, generate_world


@pytest.fixture(scope="session")
def small_world():
    """One shared small 4-task world for fast unit tests."""
    cfg = WorldConfig(n_train=200, n_val=40, n_test=120, n_ref_pool=200,
                      tools_per_task=6, ref_size=8)
    return generate_world(cfg, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
