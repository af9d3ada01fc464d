"""Distribution estimation under local privacy.

The package reconstructs an input distribution from locally obfuscated
reports. It provides the EM / iterative Bayesian update estimator, matrix
inversion baselines, common obfuscation mechanisms and tools for checking
whether the maximum-likelihood estimate is unique.
"""

from .errors import (
    CapacityError,
    DegenerateVectorError,
    InfeasibleError,
    InvalidInputError,
    LdpemError,
    NonIdentifiableError,
    NotInvertibleError,
)
from .estimators import EmConfig, EmpiricalDistribution, EmTrace, em_estimate, ibu, inv_estimate
from .mechanisms import Grid, Mechanism

__all__ = [
    "CapacityError",
    "DegenerateVectorError",
    "EmConfig",
    "EmTrace",
    "EmpiricalDistribution",
    "Grid",
    "InfeasibleError",
    "InvalidInputError",
    "LdpemError",
    "Mechanism",
    "NonIdentifiableError",
    "NotInvertibleError",
    "em_estimate",
    "ibu",
    "inv_estimate",
]

__version__ = "0.1.0"
