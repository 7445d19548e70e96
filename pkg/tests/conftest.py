import numpy as np
import pytest

from rdlab.schemas.training import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_config(**overrides) -> TrainConfig:
    """A grid small enough to train in well under a second per run"""
    document = {
        "lambdas": [0.0018, 0.0035, 0.0067, 0.013],
        "alphas": [0.0],
        "seeds": [1],
        "steps": 6,
        "batch_size": 16,
        "codec_lr": 1e-3,
        "source_lr": 1e-3,
        "eval_every": 3,
        "source": {"kind": "gauss_mix", "dim": 4, "seed": 5, "num_samples": 200},
        "architecture": {"hidden": [8], "latent": 2},
        "source_model": {"mode": "factorized", "hidden": 8},
    }
    document.update(overrides)
    return TrainConfig.model_validate(document)


@pytest.fixture
def tiny_config():
    return make_config()


@pytest.fixture
def runs_dir(tmp_path):
    return tmp_path / "runs"
