import pytest
import torch

from outfitgan.config import load_config
from outfitgan.data import generate_synthetic_corpus

TINY = {
    "data.resolution": 32,
    "generator.resolution": 32,
    "data.n_outfits": 24,
    "extractor.d_v": 16,
    "extractor.d_cat": 4,
    "extractor.hidden": 8,
    "extractor.mlp_layers": 2,
    "extractor.mlp_width": 16,
    "extractor.channels": [4, 8, 8],
    "extractor.style_dim": 8,
    "generator.base_channels": 4,
    "generator.max_channels": 8,
    "dis.channels": 4,
    "dis.max_channels": 8,
    "collocation.channels": 4,
    "collocation.feature_dim": 8,
    "collocation.embed_dim": 8,
    "collocation.margin": 1.0,
    "loss.perceptual_channels": [4, 4, 8, 8],
    "train.ckpt_every": 0,
}


@pytest.fixture
def tiny_cfg():
    return load_config(overrides=TINY)


@pytest.fixture(scope="session")
def tiny_split():
    return generate_synthetic_corpus(seed=3, n_outfits=24, resolution=32, n_categories=4)


@pytest.fixture(scope="session")
def corpus64():
    return generate_synthetic_corpus(seed=7, n_outfits=200, resolution=64, n_categories=4)


@pytest.fixture(autouse=True)
def _float32_default():
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(torch.float32)
