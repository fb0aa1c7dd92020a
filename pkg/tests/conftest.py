import numpy as np
import pytest

from engagekit.model import ModelConfig, STREAMS

TOY_FEATURE_DIMS = {
    "opensmile": 5,
    "w2vbert": 7,
    "clip": 6,
    "openface": 4,
    "openpose": 3,
}


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        model_dim=8,
        heads=2,
        dropout=0.0,
        core_len=4,
        context_len=2,
        feature_dims=dict(TOY_FEATURE_DIMS),
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_bundle(cfg: ModelConfig, length: int, rng: np.random.Generator,
                  batch: int | None = None) -> dict:
    shape = (length,) if batch is None else (batch, length)
    return {s: rng.standard_normal(shape + (cfg.feature_dims[s],)) for s in STREAMS}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
