import numpy as np
import pytest
import torch

from sleepfold.model import ModelConfig


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def tiny_model_config(**kwargs) -> ModelConfig:
    """A miniature configuration for fast structural tests."""
    defaults = dict(
        variant="folded",
        sequence_length=8,
        n_subsequences=2,
        n_bins=9,
        n_filters=3,
        attention_size=5,
        epoch_hidden=8,
        context_hidden=8,
        head_units=8,
        dropout=0.0,
        l2=0.0,
    )
    defaults.update(kwargs)
    return ModelConfig(**defaults)
