"""Likelihood-based system identification for state-space models.

Kalman and unscented filtering marginal likelihoods, Markov-parameter
estimators with ERA realization, multiple-shooting objectives, MAP
optimization and DRAM-within-Gibbs sampling.
"""

from .core import (
    BayesIdError,
    Dataset,
    DivergenceError,
    GaussianBelief,
    HalfNormal,
    ImproperUniform,
    LtiModel,
    NonlinearModel,
    Normal,
    NumericalError,
    PreconditionError,
    PriorSpec,
    log_prior,
    simulate,
)
from .era import era, ls_era
from .filtering import (
    FilterResult,
    UkfConfig,
    io_log_likelihood,
    kalman_log_marginal_likelihood,
    log_likelihood,
    ukf_log_marginal_likelihood,
)
from .inference import (
    Chain,
    DramConfig,
    LogPosterior,
    MapOptions,
    dram_within_gibbs,
    map_estimate,
    posterior_predictive,
)
from .markov import (
    MarkovSequence,
    build_lambda,
    gls_markov_subtraj,
    ls_markov_subtraj,
    markov_error,
    markov_from_statespace,
    mle_markov,
)
from .objectives import (
    SegmentPlan,
    deterministic_ls,
    joint_log_posterior,
    landscape_scan,
    multiple_shooting,
    propagator_ls,
)

__version__ = "0.1.0"

__all__ = [
    "BayesIdError",
    "build_lambda",
    "Chain",
    "Dataset",
    "deterministic_ls",
    "DivergenceError",
    "dram_within_gibbs",
    "DramConfig",
    "era",
    "FilterResult",
    "GaussianBelief",
    "gls_markov_subtraj",
    "HalfNormal",
    "ImproperUniform",
    "io_log_likelihood",
    "joint_log_posterior",
    "kalman_log_marginal_likelihood",
    "landscape_scan",
    "log_likelihood",
    "log_prior",
    "LogPosterior",
    "ls_era",
    "ls_markov_subtraj",
    "LtiModel",
    "map_estimate",
    "MapOptions",
    "markov_error",
    "markov_from_statespace",
    "MarkovSequence",
    "mle_markov",
    "multiple_shooting",
    "NonlinearModel",
    "Normal",
    "NumericalError",
    "posterior_predictive",
    "PreconditionError",
    "PriorSpec",
    "propagator_ls",
    "SegmentPlan",
    "simulate",
    "ukf_log_marginal_likelihood",
    "UkfConfig",
]
