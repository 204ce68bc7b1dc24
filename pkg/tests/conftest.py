import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from colorctrl.model import ModelConfig, ToyMMDiT
from colorctrl.sampler import SampleParams, Sampler


@pytest.fixture(scope="session")
def tiny_config():
    # maps stay at most 8x8: 4 text + 4 vision tokens
    return ModelConfig(image_size=4, patch=2, n_text=4, d_model=8, n_heads=2, n_layers=2, vocab_size=64)


@pytest.fixture(scope="session")
def tiny_sampler(tiny_config):
    return Sampler(ToyMMDiT(tiny_config))


@pytest.fixture(scope="session")
def fast_params():
    return SampleParams(steps=3)


@pytest.fixture(scope="session")
def default_sampler():
    return Sampler(ToyMMDiT(ModelConfig()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
