"""Spatial deconfounding of direct and spillover effects on gridded data.

Stage 1 fits a conditional VAE with a Gaussian-Markov random field prior that
reconstructs a substitute confounder from each site's own and neighboring
treatments and covariates.  Stage 2 fits an outcome head on treatments,
covariates and the substitute confounder, and plug-in contrasts of that head give
direct and spillover effects.
"""
from .lattice import GridShape, SiteIndex, neighbors, is_complete_neighborhood, adjacency_matrix, laplacian
from .dataset import SpatialDataset, load_dataset, save_dataset, mask_covariates, standardize, unstandardize
from .gmrf import GmrfPrior, CarModel, build_prior, sample_gmrf, kl_diag_to_gmrf, quadratic_penalty, fit_car
from .split import SplitParams, SplitAssignment, spatial_split
from .cvae import (CvaeConfig, CvaeParams, PosteriorField, SubstituteConfounder, TrainingDivergence, encode,
                   decode_logit, elbo_loss, train_cvae, substitute_confounder, posterior_draws)
from .outcome import (HeadConfig, Intervention, OutcomeModel, featurize, fit_outcome, spline_plus_fit,
                      fit_end_to_end, predict)
from .estimands import (EffectEstimate, BiasReport, direct_effect, spillover_effect, uncertainty_band,
                        standardized_abs_bias)
from .checks import CheckReport, discrepancy, predictive_p_value
from .datagen import (ScenarioConfig, Scenario, SyntheticWorldConfig, fit_predictor, make_scenario,
                      counterfactual_outcomes, true_effects, rank_confounders, synthetic_lattice_world)

__version__ = "0.1.0"

__all__ = [
    "GridShape",
    "SiteIndex",
    "neighbors",
    "is_complete_neighborhood",
    "adjacency_matrix",
    "laplacian",
    "SpatialDataset",
    "load_dataset",
    "save_dataset",
    "mask_covariates",
    "standardize",
    "unstandardize",
    "GmrfPrior",
    "CarModel",
    "build_prior",
    "sample_gmrf",
    "kl_diag_to_gmrf",
    "quadratic_penalty",
    "fit_car",
    "SplitParams",
    "SplitAssignment",
    "spatial_split",
    "CvaeConfig",
    "CvaeParams",
    "PosteriorField",
    "SubstituteConfounder",
    "TrainingDivergence",
    "encode",
    "decode_logit",
    "elbo_loss",
    "train_cvae",
    "substitute_confounder",
    "posterior_draws",
    "HeadConfig",
    "Intervention",
    "OutcomeModel",
    "featurize",
    "fit_outcome",
    "spline_plus_fit",
    "fit_end_to_end",
    "predict",
    "EffectEstimate",
    "BiasReport",
    "direct_effect",
    "spillover_effect",
    "uncertainty_band",
    "standardized_abs_bias",
    "CheckReport",
    "discrepancy",
    "predictive_p_value",
    "ScenarioConfig",
    "Scenario",
    "SyntheticWorldConfig",
    "fit_predictor",
    "make_scenario",
    "counterfactual_outcomes",
    "true_effects",
    "rank_confounders",
    "synthetic_lattice_world",
]
