"""Random flows on the torus aligned with a product Hamiltonian, their
characteristic densities and a coalescing particle model."""

import os

# one worker thread pool that needs no optional libraries
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .hamiltonian import (FactorProfile, TorusGeometry, build_geometry, make_fourier_profile,
                          make_perturbed_trig_profile, make_sturm_liouville_profile,
                          make_trig_profile, verify_conditions)
from .fields import AlignedCoefficients, FieldBundle, coefficients_from_spec, sign_survey
from .stochastics import BrownianPath, OUPath, brownian_path, ou_path, stream_split

__all__ = [
    "AlignedCoefficients", "BrownianPath", "FactorProfile", "FieldBundle", "OUPath",
    "TorusGeometry", "brownian_path", "build_geometry", "coefficients_from_spec",
    "make_fourier_profile", "make_perturbed_trig_profile", "make_sturm_liouville_profile",
    "make_trig_profile", "ou_path", "sign_survey", "stream_split", "verify_conditions",
]
__version__ = "0.1.0"
