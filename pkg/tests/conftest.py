import numpy as np
import pytest

from meshflow.geometry import SimplicialMesh, build_reference_element, uniform_square_mesh
from meshflow.verify import perturbed_grid


@pytest.fixture
def ref2():
    return build_reference_element(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def unit_right_triangle():
    return SimplicialMesh.from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])


@pytest.fixture
def grid4():
    return uniform_square_mesh(4)


@pytest.fixture
def random_grid4(rng):
    return perturbed_grid(4, 0.2, rng)


def random_spd(rng, n, d=2, lo=0.5, hi=4.0):
    """Random SPD matrices with eigenvalues in [lo, hi]."""
    A = rng.normal(size=(n, d, d))
    Q, _ = np.linalg.qr(A)
    lam = rng.uniform(lo, hi, size=(n, d))
    return (Q * lam[:, None, :]) @ np.swapaxes(Q, -1, -2)


def random_jacobians(rng, n, d=2):
    """Random matrices with positive determinant."""
    J = rng.normal(size=(n, d, d)) + 1.5 * np.eye(d)
    flip = np.linalg.det(J) < 0
    J[flip, 0] *= -1.0
    return J
