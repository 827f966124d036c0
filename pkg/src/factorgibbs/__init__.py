"""Gibbs sampling for Bayesian exploratory factor analysis with a lower-triangular loading matrix.

Two loading priors are available: the usual independent normal /
half-normal prior, and an order-invariant prior (the law of the L factor of
a spherical Gaussian matrix) under which the implied covariance matrix does
not depend on how the variables are ordered.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DimensionMismatch,
    DomainError,
    FactorGibbsError,
    InvalidInitialPoints,
    InvalidTruth,
    NonConvergence,
    NotPositiveDefinite,
    RankDeficient,
)
from .priors import ModelDims, PriorFamily, PriorSpec  # noqa: E402
from .gibbs import ChainState, DrawStore, GibbsConfig, StoreMode, run_chain  # noqa: E402
