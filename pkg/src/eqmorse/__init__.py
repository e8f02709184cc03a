"""Equivariant Morse-Bott cochain complexes on small catalogue manifolds."""
from .geometry import CATALOGUE, ConfigurationError, build_scenario
from .critstruct import find_critical_orbits
from .stabilize import apply_stabilization, make_recipe
from .flow import compute_covers, diagnose_transversality
from .cochain import assemble_cartan, assemble_ordinary, cohomology

__version__ = "0.1.0"

__all__ = [
    "CATALOGUE", "ConfigurationError", "build_scenario", "find_critical_orbits", "apply_stabilization",
    "make_recipe", "compute_covers", "diagnose_transversality", "assemble_cartan", "assemble_ordinary",
    "cohomology",
]
