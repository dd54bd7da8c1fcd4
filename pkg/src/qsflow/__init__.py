"""Quantum stochastic flows: Ito algebras, noise lattices, germs, trajectories, cocycles and bounds."""

from qsflow.germ_analyzer import (
    KLCoefficients,
    StructuralGerm,
    check_ccp,
    conservativity_report,
    extract_stinespring,
    generator_from_KL,
)
from qsflow.ito_algebra import ItoAlgebra, ItoQuadruple, hp_product, star, star_product, verify_ito_axioms
from qsflow.noise_lattice import SliceSpace, TimeGrid

__all__ = [
    "ItoAlgebra",
    "ItoQuadruple",
    "KLCoefficients",
    "SliceSpace",
    "StructuralGerm",
    "TimeGrid",
    "check_ccp",
    "conservativity_report",
    "extract_stinespring",
    "generator_from_KL",
    "hp_product",
    "star",
    "star_product",
    "verify_ito_axioms",
]
__version__ = "0.1.0"
