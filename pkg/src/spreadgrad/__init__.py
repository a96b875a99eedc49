"""Local speed and direction of invasive-species spread from waiting-time data.

A Gaussian process with Matérn-3/2 covariance is fitted to year-of-first-
appearance records; its gradient field gives local speed (inverse slope) and
direction, line integrals of the gradient flag long-range jumps, and a
spatial regression relates log speed to covariates.
"""

from .core import (DataError, Location, WaitingTimeDataset, WaitingTimeObservation, load_dataset,
                   pairwise_distances, project_albers, unproject_albers)
from .gp_fit import ChainConfig, GpParams, PosteriorDraws, fit_mcmc, load_draws, save_draws
from .gradient_field import SpreadSummary, gradient_posterior, spread_field, summarize_spread
from .jump_detection import avg_normal_gradient, box_jump_scan, rayleigh_scan, rayleigh_test
from .kernels import MaternParams, matern32, matern32_grad, matern32_hess
from .spread_regression import build_design, fit_spatial_regression, hpd_interval
from .strat_sim import SimConfig, paper_scenario, simulate

__version__ = "0.1.0"
