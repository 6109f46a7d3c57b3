import numpy as np
import pytest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mini_config():
    """The smallest config that still exercises all four stages."""
    from hilonet.model import ModelConfig

    return ModelConfig(img_size=64, patch_size=4, embed_dim=32,
                       depths=(1, 1, 1, 1), num_heads=(2, 4, 8, 16),
                       window_size=2, mlp_ratio=2, num_classes=3)
