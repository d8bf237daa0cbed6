"""Bayesian additive regression trees: continuous and probit samplers."""

from .model import (
    BartConfig,
    BartError,
    BartPosterior,
    Tree,
    backfit_continuous,
    backfit_probit,
    load_posterior,
    log_tree_prior,
    posterior_predict,
    save_posterior,
)

__all__ = [
    "BartConfig",
    "BartError",
    "BartPosterior",
    "Tree",
    "backfit_continuous",
    "backfit_probit",
    "load_posterior",
    "log_tree_prior",
    "posterior_predict",
    "save_posterior",
]
