import pytest
import torch
from hypothesis import settings

# bitwise-reproducibility contracts are stated for single-threaded execution
torch.set_num_threads(1)

settings.register_profile("suite", deadline=None, max_examples=25)
settings.load_profile("suite")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(0)
