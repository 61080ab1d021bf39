"""Inference for SDE models with Gaussian random effects in the drift."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    DesignKind,
    NormalMu,
    ParamSpace,
    Theta,
    TruncatedNormalProduct,
    UniformBox,
    design_sequence,
    get_model,
)
from .paths import Dataset, EffectsCovariance, simulate_dataset, simulate_path  # noqa: E402
from .likelihood import log_lik_total, mle, observed_fisher  # noqa: E402
from .posterior import conjugate_posterior_mu, dependent_posterior_mu, laplace_approx, rw_metropolis  # noqa: E402
