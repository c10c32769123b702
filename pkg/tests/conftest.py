import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fuseseg.data import PhantomConfig, generate_phantom_dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small misaligned phantom set shared by unit tests."""
    cfg = PhantomConfig(
        image_size=32, n_subjects=8, slices_per_subject=3,
        misalignment_amplitude=0.06, noise_sigma=0.03, seed=11,
    )
    return generate_phantom_dataset(cfg)


@pytest.fixture(scope="session")
def aligned_dataset():
    cfg = PhantomConfig(
        image_size=32, n_subjects=3, slices_per_subject=2,
        misalignment_amplitude=0.0, noise_sigma=0.02, seed=5,
    )
    return generate_phantom_dataset(cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
