"""Numerical lab for magnetic Schroedinger operators in four dimensions.

Magnetic geometry, Weyl-type counting densities, lattice discretization,
eigenvalue counting, classical drift dynamics and (mu, h) sweeps.
"""

from .counting import CountingCurve, SpectralCounter, dense_count, inertia_count, kpm_count
from .discrete import DiscreteHamiltonian, GridSpec, build_hamiltonian
from .dynamics import DriftReport, PhaseState, drift_report, guiding_center, integrate
from .experiments import RemainderFit, SweepSpec, classify_domain, run_sweep
from .fields import FieldData, make_field
from .geometry import IntensityPair, PointClassification, classify_point, intensity_pair
from .measure import PowerLawRegressor
from .params import SemiclassicalParams
from .weyl import corrected_density, integrate_density, magnetic_weyl_density, weyl_density

__version__ = "0.1.0"

__all__ = [
    "CountingCurve",
    "DiscreteHamiltonian",
    "DriftReport",
    "FieldData",
    "GridSpec",
    "IntensityPair",
    "PhaseState",
    "PointClassification",
    "PowerLawRegressor",
    "RemainderFit",
    "SemiclassicalParams",
    "SpectralCounter",
    "SweepSpec",
    "build_hamiltonian",
    "classify_domain",
    "classify_point",
    "corrected_density",
    "dense_count",
    "drift_report",
    "guiding_center",
    "inertia_count",
    "integrate",
    "integrate_density",
    "intensity_pair",
    "kpm_count",
    "magnetic_weyl_density",
    "make_field",
    "run_sweep",
    "weyl_density",
]
