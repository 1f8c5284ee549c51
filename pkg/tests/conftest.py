import numpy as np
import pytest

from mbb.grids import DiscreteMeasure, Grid1D


@pytest.fixture
def grid400():
    return Grid1D(-8.0, 8.0, 400)


@pytest.fixture
def aligned_grid():
    # centers include 0 and +-1 (x_min/h is a half-integer)
    return Grid1D(-2.25, 2.25, 225)


@pytest.fixture
def two_point(aligned_grid):
    return DiscreteMeasure.from_atoms(aligned_grid, [-1.0, 1.0], [0.5, 0.5])


@pytest.fixture
def delta0(aligned_grid):
    return DiscreteMeasure.point_mass(aligned_grid, 0.0)


def rng(seed=0):
    return np.random.default_rng(seed)
