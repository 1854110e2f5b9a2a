"""Approximate posterior inference."""

from .hmc import HMCChain, HMCConfig, bnn_potential, hmc_run, leapfrog
from .objective import GaussianMeanObjective, NetworkObjective, Objective
from .posterior import (
    GaussianVariationalPosterior, PriorSpec, SamplePosterior, SWAGMoments, kl_diag_gaussians,
    kl_q_p, load_posterior, sample_posterior, save_posterior,
)
from .swag import SWAGConfig, swag_collect, swag_from_iterates
from .vi import VIConfig, bbb_step, natgrad_update, natgrad_vi_step, train_vi

__all__ = [
    "HMCChain", "HMCConfig", "bnn_potential", "hmc_run", "leapfrog",
    "GaussianMeanObjective", "NetworkObjective", "Objective",
    "GaussianVariationalPosterior", "PriorSpec", "SamplePosterior", "SWAGMoments",
    "kl_diag_gaussians", "kl_q_p", "load_posterior", "sample_posterior", "save_posterior",
    "SWAGConfig", "swag_collect", "swag_from_iterates",
    "VIConfig", "bbb_step", "natgrad_update", "natgrad_vi_step", "train_vi",
]
