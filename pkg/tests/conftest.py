import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfglab.data import DataModel
from mfglab.functions import CosineRidge, Gaussian, Quadratic
from mfglab.model import HamiltonianModel

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def free_model():
    return HamiltonianModel(1)


@pytest.fixture
def quadratic_data():
    return DataModel(1, Quadratic(1.0))


@pytest.fixture
def interacting_2d():
    model = HamiltonianModel(2, [[1.5, 0.2], [0.2, 1.0]], CosineRidge(0.3))
    data = DataModel(2, Quadratic(5.0), Gaussian(1.0, 1.0), Quadratic(0.5), Gaussian(0.3, 1.0))
    return model, data


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
