import numpy as np
import pytest

from brenierlab._validation import check_density_path, check_lower_bound, check_same_grid
from brenierlab.fields import DensityPath, uniform_times
from brenierlab.torus import TorusGrid


def test_same_grid():
    check_same_grid(TorusGrid(1, 4), TorusGrid(1, 4))
    with pytest.raises(ValueError):
        check_same_grid(TorusGrid(1, 4), TorusGrid(1, 8))


def test_density_path_checks():
    g = TorusGrid(1, 4)
    rho = DensityPath.uniform(g, 2)
    assert check_density_path(rho) is rho
    frames = np.ones((3, 4))
    frames[0] = [2, 0, 1, 1]
    bad = DensityPath(g, uniform_times(2), frames)
    with pytest.raises(ValueError):
        check_density_path(bad)
    check_density_path(bad, admissible=False)
    with pytest.raises(TypeError):
        check_density_path(np.ones((3, 4)))


def test_lower_bound():
    check_lower_bound(np.full(4, 0.8), 0.75)
    with pytest.raises(ValueError, match="rho"):
        check_lower_bound(np.array([0.8, 0.5]), 0.75, "rho")
