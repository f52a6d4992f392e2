"""Cost-penalized I-projection stochastic interventions for discrete treatments."""
from .tilt import (
    ActionSpace,
    CostSpec,
    Coupling,
    DegenerateKernelError,
    TiltConfig,
    TiltWeights,
    cpip_coupling,
    ipi_propensity,
    pushforward,
    tilt_weights,
    tilted_limits,
    tilted_marginals,
    tilted_source,
    tilted_target,
)

__version__ = "0.1.0"

__all__ = [
    "ActionSpace",
    "CostSpec",
    "Coupling",
    "DegenerateKernelError",
    "TiltConfig",
    "TiltWeights",
    "cpip_coupling",
    "ipi_propensity",
    "pushforward",
    "tilt_weights",
    "tilted_limits",
    "tilted_marginals",
    "tilted_source",
    "tilted_target",
    "__version__",
]
