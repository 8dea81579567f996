"""Storm-surge return levels from threshold exceedances, with Bayesian model
averaging over stationary and covariate-driven nonstationary PP/GPD models."""

from .covariates import CovariateKind, CovariateSeries
from .models import (
    ModelStructure,
    NonstatLevel,
    ParameterVector,
    all_structures,
    log_likelihood,
    log_posterior,
)
from .preprocess import ExceedanceSet, preprocess_station
from .sampler import ChainConfig, PosteriorEnsemble

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "CovariateKind",
    "CovariateSeries",
    "ExceedanceSet",
    "ModelStructure",
    "NonstatLevel",
    "ParameterVector",
    "PosteriorEnsemble",
    "all_structures",
    "log_likelihood",
    "log_posterior",
    "preprocess_station",
    "__version__",
]
