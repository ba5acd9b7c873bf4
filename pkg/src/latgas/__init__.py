"""Two-conserved-quantity lattice gases, their hyperbolic scaling limits,
and the Lax-entropy cutoff machinery, with desk-scale verification harnesses.
"""

from .models import SpinModel, build_model, validate_conditions, ModelError
from .thermo import (CanonicalParams, DomainPolygon, gibbs_measure,
                     invert_parameters, thermo_entropy, OutOfDomain,
                     NonConvergence)
from .fluxes import FluxPair, macroscopic_flux, onsager_residual

__all__ = [
    "SpinModel", "build_model", "validate_conditions", "ModelError",
    "CanonicalParams", "DomainPolygon", "gibbs_measure", "invert_parameters",
    "thermo_entropy", "OutOfDomain", "NonConvergence",
    "FluxPair", "macroscopic_flux", "onsager_residual",
]

__version__ = "0.1.0"
