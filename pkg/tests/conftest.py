import numpy as np
import pytest

from facetree.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """16 px, 3 keypoints, 2 stages: small enough for per-test forward passes."""
    return ModelConfig(input_size=16, num_keypoints=3, branch_stages=2, stage_widths=(8, 12),
                       branch_channels=4, branch_up_channels=4, head_width=8,
                       negative_keep_rate=0.5, loss_weights=(1.0, 1.0, 0.01, 1.0))
