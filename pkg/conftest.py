import numpy as np
import pytest

import numerics
from config import GenConfig, ModelConfig, OptimConfig
from data import generate_synthetic, split_chronological
from meda import TrainSettings

TINY_GEN = dict(n_samples=600, n_users=40, n_items=60, n_categories=8, latent_dim=4, max_seq_len=4, seed=11)


@pytest.fixture
def check_mode():
    with numerics.check_mode(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(GenConfig(**TINY_GEN))


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_chronological(tiny_dataset, 0.2)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(embed_dim=4, hidden=[8])


@pytest.fixture
def settings(tiny_model_cfg):
    return TrainSettings(
        model=tiny_model_cfg,
        optim=OptimConfig(kind="adam", learning_rate=0.01),
        batch_size=32,
        base_seed=5,
        run_id="test-run",
        eval_workers=1,
    )


@pytest.fixture
def tiny_experiment(tmp_path):
    """Payload for a complete experiment file on a tiny synthetic log."""
    return {
        "data": {"source": "synthetic", "synthetic": dict(TINY_GEN), "test_fraction": 0.2},
        "model": {"embed_dim": 4, "hidden": [8]},
        "optim": {"kind": "adam", "learning_rate": 0.01},
        "run": {"method": "meda_nc", "k": 2, "batch_size": 32, "base_seed": 5, "eval_workers": 1, "output_dir": str(tmp_path / "out")},
    }
