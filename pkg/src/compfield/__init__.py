"""compfield: Bayesian reconstruction of compositional fields on a lattice.

Fits a Dirichlet observation layer linked through the additive log-ratio
transform to a covariate regression (with horseshoe shrinkage) plus a
multivariate Gaussian Markov random field, via blocked MCMC; evaluates
fits with cross-validation, DIC, and average compositional distances.
"""

__version__ = "0.1.0"

from .compositional import (
    aitchison_distance,
    alr_forward,
    alr_inverse,
    average_compositional_distance,
    dirichlet_logpdf,
    dirichlet_sample,
)
from .gmrf import (
    GmrfSpec,
    LatticeGraph,
    build_scalar_precision,
    field_logpdf,
    joint_precision,
    sample_field,
    sigma_gibbs_conditional,
)
from .inference import (
    ChainConfig,
    PosteriorSummary,
    decompose_predictor,
    predictive_region,
    reconstruct,
    run_chain,
    run_chains,
)
from .model import (
    COVARIATE_PRESETS,
    Coefficients,
    Model,
    ModelState,
    ObservationSet,
    PriorConfig,
    build_design,
    linear_predictor,
    log_likelihood,
    log_posterior,
    simulate_dataset,
)
from .validation import compare_maps, cross_validate, dic, make_folds

__all__ = [
    "__version__",
    "aitchison_distance",
    "alr_forward",
    "alr_inverse",
    "average_compositional_distance",
    "dirichlet_logpdf",
    "dirichlet_sample",
    "GmrfSpec",
    "LatticeGraph",
    "build_scalar_precision",
    "field_logpdf",
    "joint_precision",
    "sample_field",
    "sigma_gibbs_conditional",
    "ChainConfig",
    "PosteriorSummary",
    "decompose_predictor",
    "predictive_region",
    "reconstruct",
    "run_chain",
    "run_chains",
    "COVARIATE_PRESETS",
    "Coefficients",
    "Model",
    "ModelState",
    "ObservationSet",
    "PriorConfig",
    "build_design",
    "linear_predictor",
    "log_likelihood",
    "log_posterior",
    "simulate_dataset",
    "compare_maps",
    "cross_validate",
    "dic",
    "make_folds",
]
