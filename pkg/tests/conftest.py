import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere_mesh():
    from shapedis.geometry import extract_mesh

    field = lambda p: np.linalg.norm(p, axis=1) - 0.6  # noqa: E731
    return extract_mesh(field, resolution=48)


@pytest.fixture(scope="session")
def small_cohort():
    from shapedis.geometry import generate_cohort

    return generate_cohort(12, seed=7)
