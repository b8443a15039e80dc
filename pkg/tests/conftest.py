import numpy as np
import pytest

from lenslab.metric_chart import (EuclideanChart, PolarNormalChart, make_chart, sphere_chart)


@pytest.fixture(scope="session")
def flat():
    return EuclideanChart()


@pytest.fixture(scope="session")
def sphere():
    return sphere_chart(1.0)


@pytest.fixture(scope="session")
def conformal():
    # phi = 0.2 (1 - |x|^2) + tilt; not flat, phi = tilt.x on the circle
    return make_chart("conformal", phi_amplitude=0.2, phi_tilt=(0.1, -0.05))


@pytest.fixture(scope="session")
def conformal_zero_boundary():
    # phi = 0.1 (1 - |x|^2) vanishes on the circle
    return make_chart("conformal", phi_amplitude=0.1)


@pytest.fixture(scope="session")
def polar():
    return PolarNormalChart(0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
