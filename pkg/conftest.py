"""共享的小模型夹具"""
import numpy as np
import pytest

from gatedkv.models import ModelConfig
from gatedkv.training import build_model


def tiny_config(**overrides) -> ModelConfig:
    params = dict(vocab_size=16, n_layers=2, d_model=8, n_heads=2, d_k=4, d_v=4, d_ff=16,
                  ag_heads=1, ag_d_k=4, tau=0.5, gamma=2.0, max_seq=16)
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def config() -> ModelConfig:
    return tiny_config()


@pytest.fixture
def model(config):
    return build_model(config, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    """按覆盖参数构造小模型"""
    def factory(seed: int = 0, **overrides):
        return build_model(tiny_config(**overrides), seed=seed)
    return factory
