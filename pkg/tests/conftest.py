import numpy as np
import pytest

from slowfastmc import StreamFamily, TimeGrid, ref_ou_system


@pytest.fixture
def family():
    return StreamFamily(20250809)


@pytest.fixture
def ref_ou():
    return ref_ou_system()


@pytest.fixture
def unit_grid():
    return TimeGrid(0.0, 1.0, 250)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
