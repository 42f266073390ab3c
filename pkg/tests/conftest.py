import math

import numpy as np
import pytest

from inertial_coalescence.fields import AlignedCoefficients, FieldBundle
from inertial_coalescence.hamiltonian import (build_geometry, make_perturbed_trig_profile,
                                              make_trig_profile)


@pytest.fixture(scope="session")
def trig_geometry():
    return build_geometry(make_trig_profile(1), make_trig_profile(1, math.pi / 2), 0.3)


@pytest.fixture(scope="session")
def perturbed_geometry():
    return build_geometry(make_perturbed_trig_profile(0.25), make_trig_profile(1, math.pi / 2), 0.3)


@pytest.fixture(scope="session")
def trig_bundle(trig_geometry):
    return FieldBundle(trig_geometry, AlignedCoefficients.constant(1.0, 1.0))


@pytest.fixture(scope="session")
def perturbed_bundle(perturbed_geometry):
    return FieldBundle(perturbed_geometry, AlignedCoefficients.constant(1.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
