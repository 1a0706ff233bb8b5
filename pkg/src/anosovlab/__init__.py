"""Numerical laboratory for non-stationary hyperbolic torus dynamics.

The package builds finite compositions of perturbed hyperbolic toral
automorphisms, certifies cone and expansion assumptions, evolves standard
pairs (unstable curves with densities), computes finite-time invariant line
fields and holonomy Jacobians, couples pairs of standard families along
magnets, and measures exponential memory loss between evolved measures.
"""

from .coupling import (CouplingError, CouplingEvent, CouplingLedger,
                       CrossingRecord, Magnet, Rectangle, build_rectangle,
                       choose_magnets, couple_step, detect_crossings,
                       recovery_step, run_coupling, separation_check)
from .curves import (DensityProfile, RefinementPolicy, StandardFamily,
                     StandardPair, UnstableCurve, curvature_check,
                     distortion_check, evolve_family, evolve_pair,
                     growth_check, line_curve, random_standard_pair,
                     uniform_pair, wiggle_curve)
from .fields import (FieldCertificateError, HolderEstimate, estimate_holder,
                     eval_stable_field, eval_unstable_field,
                     sample_field_grid)
from .geometry import Cone, Direction, subspace_dist, subspace_dist_prime
from .holonomy import (HolonomyError, HolonomyMap, StableLeafSegment,
                       build_holonomy, compute_jacobians,
                       holonomy_decay_series, holonomy_jacobian,
                       matched_forward_separation, trace_stable_leaf)
from .maps import AnosovMap, GuideMap, linear_eigen_data
from .sequence import MapSequence, build_sequence
from .trig import TrigScalar, TrigVectorField
from .validation import ValidationReport, validate_assumptions

__version__ = "0.1.0"

__all__ = [
    "AnosovMap",
    "Cone",
    "CouplingError",
    "CouplingEvent",
    "CouplingLedger",
    "CrossingRecord",
    "DensityProfile",
    "Direction",
    "FieldCertificateError",
    "GuideMap",
    "HolderEstimate",
    "HolonomyError",
    "HolonomyMap",
    "Magnet",
    "MapSequence",
    "Rectangle",
    "RefinementPolicy",
    "StableLeafSegment",
    "StandardFamily",
    "StandardPair",
    "TrigScalar",
    "TrigVectorField",
    "UnstableCurve",
    "ValidationReport",
    "build_holonomy",
    "build_rectangle",
    "build_sequence",
    "choose_magnets",
    "compute_jacobians",
    "couple_step",
    "curvature_check",
    "detect_crossings",
    "distortion_check",
    "estimate_holder",
    "eval_stable_field",
    "eval_unstable_field",
    "evolve_family",
    "evolve_pair",
    "growth_check",
    "holonomy_decay_series",
    "holonomy_jacobian",
    "line_curve",
    "linear_eigen_data",
    "matched_forward_separation",
    "random_standard_pair",
    "recovery_step",
    "run_coupling",
    "sample_field_grid",
    "separation_check",
    "subspace_dist",
    "subspace_dist_prime",
    "trace_stable_leaf",
    "uniform_pair",
    "wiggle_curve",
    "validate_assumptions",
    "__version__",
]
