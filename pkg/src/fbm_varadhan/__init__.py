"""Numerical laboratory for small-noise density asymptotics of fBm-driven RDEs.

The package covers exact fractional Brownian motion sampling, the step-function
Hilbert space of the fBm covariance, vector-field brackets, Wong-Zakai flows
with Jacobians, Malliavin matrices, Cameron-Martin energy minimisation and
Monte Carlo density estimation.
"""

import jax

# every numerical routine here assumes double precision
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DomainError,
    FbmError,
    FlowBlowUp,
    InfeasibleTarget,
    JetOrderError,
    OmegaSpanError,
)
from .gaussian_driver import (  # noqa: E402
    FbmEnsemble,
    GridSpec,
    empirical_covariance_report,
    fbm_covariance,
    rect_increment,
    sample_fbm,
)
from .hilbert import (  # noqa: E402
    GramForm,
    StepCoeffs,
    cm_norm_sq,
    embed_cm,
    gram_matrix,
    inner_h,
    pvar_norm,
)

__all__ = [
    "DomainError",
    "FbmError",
    "FlowBlowUp",
    "InfeasibleTarget",
    "JetOrderError",
    "OmegaSpanError",
    "FbmEnsemble",
    "GridSpec",
    "GramForm",
    "StepCoeffs",
    "cm_norm_sq",
    "embed_cm",
    "empirical_covariance_report",
    "fbm_covariance",
    "gram_matrix",
    "inner_h",
    "pvar_norm",
    "rect_increment",
    "sample_fbm",
]
