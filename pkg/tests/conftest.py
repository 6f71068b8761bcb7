import numpy as np
import pytest

from castr.config import settings_from_dict
from castr.model import TextRecognizer

# a deliberately small geometry: 32x32 image, patch 8 -> 4x4 grid,
# 17 tokens, two stages of two blocks, 16-symbol charset
TOY = {
    "encoder_spec": "e-cc(2:2)-32,4,4",
    "decoder_blocks": 1,
    "decoder_dim": 32,
    "decoder_heads": 4,
    "patch": 8,
    "image_h": 32,
    "image_w": 32,
    "charset": "0123456789ABCDEF",
    "max_len": 4,
    "seed": 0,
}


def toy_settings(**overrides):
    d = dict(TOY)
    d.update(overrides)
    return settings_from_dict(d)


def toy_model(dtype=np.float32, **overrides) -> TextRecognizer:
    return TextRecognizer(toy_settings(**overrides), dtype=dtype)


@pytest.fixture
def model32():
    return toy_model()


@pytest.fixture
def model64():
    return toy_model(dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
