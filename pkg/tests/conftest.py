import pytest

from config_manager import ConfigManager
from phantom_engine import PhantomEngine, PhantomSpec


@pytest.fixture
def tiny_user_config():
    """Smallest geometry the pipeline accepts: 8^3 volumes, 4^3 patches, two encoder stages"""
    return {
        "data": {"resolution": 8, "total_scans": 10, "train_scans": 4, "test_scans": 2},
        "pretrain": {"epochs": 1, "scans_per_batch": 2, "encoder": {"channels": [2, 4]},
                     "head": {"hidden_dim": 8, "output_dim": 4}},
        "finetune": {"epochs": 1, "warmup_epochs": 1, "batch_size": 2},
        "mc": {"samples": 2, "percentiles": [5, 95]},
        "eval": {"fractions": [0.5, 1.0], "seeds": [0], "temperatures": [0.5, 1.0]},
    }


@pytest.fixture
def tiny_config(tiny_user_config):
    return ConfigManager.resolve(tiny_user_config)


@pytest.fixture
def tiny_splits():
    pairs = [PhantomEngine.generate_phantom(PhantomSpec(dims=(8, 8, 8), seed=100 + s)) for s in range(6)]
    return pairs[:4], pairs[4:]
