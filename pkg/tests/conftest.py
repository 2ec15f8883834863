import numpy as np
import pytest

from surftex.cameras import make_camera_ring
from surftex.primitives import make_cube, make_icosphere, make_quad, make_uv_sphere


@pytest.fixture(scope="session")
def quad():
    return make_quad()


@pytest.fixture(scope="session")
def cube():
    return make_cube()


@pytest.fixture(scope="session")
def icosphere1():
    return make_icosphere(1)


@pytest.fixture(scope="session")
def icosphere2():
    return make_icosphere(2)


@pytest.fixture(scope="session")
def uv_sphere():
    return make_uv_sphere()


@pytest.fixture
def ring4():
    return make_camera_ring(4, resolution=64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
