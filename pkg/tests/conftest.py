import numpy as np
import pytest

from scfa import random_tensor


@pytest.fixture
def rand():
    return np.random.default_rng(12345)


def make_batch(B, H, T, D, seed=0, dtype=np.float64):
    """Q, K, V engine-layout tensors from consecutive seeds."""
    return (
        random_tensor((B, H, T, D), seed, dtype=dtype),
        random_tensor((B, H, T, D), seed + 1, dtype=dtype),
        random_tensor((B, H, T, D), seed + 2, dtype=dtype),
    )
