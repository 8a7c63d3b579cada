import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from residiff.config import RunConfig

settings.register_profile(
    "toolkit",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("toolkit")

torch.set_num_threads(2)


@pytest.fixture
def tiny_config() -> RunConfig:
    """A config small enough for fast CPU tests (two encoder levels, 8x8+ inputs)."""
    return RunConfig.from_dict(
        {
            "networks": {
                "cpm_base_channels": 8,
                "denoiser_base_channels": 4,
                "channel_multipliers": [1, 2],
                "gamma_embedding_dim": 8,
                "aux_width": 4,
            },
            "guidance": {"n_neighbors": 2, "pyramid_levels": 2},
            "schedule": {"steps": 20},
            "train": {
                "iterations": 5,
                "batch_size": 2,
                "seed": 0,
                "checkpoint_every": 5,
                "eval_every": 5,
                "n_negatives": 2,
            },
            "sample": {"n_inference_steps": 4, "n_samples_for_ams": 1, "seed": 0},
        }
    )


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    """A 6-subject 16^3 phantom dataset matching the tiny config."""
    from residiff.data import generate_dataset

    root = tmp_path / "data"
    generate_dataset(root, n_subjects=6, size=(16, 16, 16), drf=20.0, seed=11, eval_fraction=0.34)
    return root


def rand_volume(shape=(16, 16, 16), seed=0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape).astype(np.float32)
