"""Shared fixtures: seeded toy models, images and traces."""

import numpy as np
import pytest

from attnlens.evaluation import make_synthetic_dataset
from attnlens.models import TransformerModel


@pytest.fixture(scope="session")
def vit_model():
    return TransformerModel.toy("vit", seed=0)


@pytest.fixture(scope="session")
def swin_model():
    return TransformerModel.toy("swin", seed=0)


@pytest.fixture(scope="session")
def toy_image():
    rng = np.random.default_rng(7)
    return rng.random((16, 16, 1)).astype(np.float32)


@pytest.fixture(scope="session")
def vit_trace(vit_model, toy_image):
    return vit_model.trace(toy_image)


@pytest.fixture(scope="session")
def swin_trace(swin_model, toy_image):
    return swin_model.trace(toy_image)


@pytest.fixture
def samples():
    return make_synthetic_dataset(seed=3, n=6)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
