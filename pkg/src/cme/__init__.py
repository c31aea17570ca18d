"""Compressed mixed-effects regression with a Horseshoe prior on the fixed effects."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    CMEError,
    ConfigError,
    DataSet,
    DataValidationError,
    FitConfig,
    NumericalError,
    PosteriorDraws,
    PriorConfig,
    ProjectionPair,
    SubjectBlock,
    TruthSpec,
    draw_projection_pair,
    validate_dataset,
)
from .gibbs import fit_cme, posterior_predict, predict_dataset, run_chain  # noqa: E402
from .oracle import fit_oracle_hs, oracle_posterior_predict  # noqa: E402
from .selection import credible_intervals, s2m_select  # noqa: E402
