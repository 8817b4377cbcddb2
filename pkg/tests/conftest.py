import numpy as np
import pytest
import torch
from hypothesis import settings

from stagedvit import ModelConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# smallest config exercising every architectural piece: one block, two
# heads, a 2x2 patch grid
TINY = dict(image_size=32, patch_size=16, dim=8, depth=1, heads=2, head_dim=4, mlp_dim=16)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(1234)
