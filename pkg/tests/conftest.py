import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from flft.arch import ArchitectureDescriptor  # noqa: E402
from flft.nn.store import init_params  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


@pytest.fixture
def tiny_arch():
    return ArchitectureDescriptor(layers=2, embed_dim=8, heads=2, vocab=16, context=8)


@pytest.fixture
def tiny_store(tiny_arch):
    return init_params(tiny_arch, np.random.default_rng(0), dtype=np.float64, std=0.3)


@pytest.fixture
def tokens():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 16, size=(2, 8))
    y = rng.integers(0, 16, size=(2, 8))
    return x, y
