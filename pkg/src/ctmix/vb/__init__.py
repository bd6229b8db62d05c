"""Variational Bayes mixture engines (MN, Mt, MFA, MtFA)."""

from .engine import FitOptions, FitResult, evb_fit, fit, state_to_model, trace_to_csv, write_trace
from .factor import initial_factor_count, prune_factors, vb_sweep_mtfa, elbo_mtfa
from .full import elbo_mt, optimize_dof, vb_sweep_mt
from .model import MixtureModel, mixture_logpdf
from .priors import Priors

__all__ = [
    "FitOptions", "FitResult", "MixtureModel", "Priors", "elbo_mt", "elbo_mtfa", "evb_fit",
    "fit", "initial_factor_count", "mixture_logpdf", "optimize_dof", "prune_factors",
    "state_to_model", "trace_to_csv", "vb_sweep_mt", "vb_sweep_mtfa", "write_trace",
]
