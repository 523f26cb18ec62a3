"""Discretized diffusion samplers, their KL divergence, and the bounds on it."""

__version__ = "0.1.0"

from .divergence import DivergenceReport, delta_exact, pathwise_kl_estimate, pinsker_tv, thm1_bound, thm2_bound
from .estimators import EstimatorSpec, KernelSpec, tweedie_score
from .schedules import Schedule, corollary_alpha, geometric_schedule, uniform_schedule
from .targets import TargetModel, atom_mixture, gaussian_mixture, isotropic_gaussian, mmse, mutual_information

__all__ = [
    "DivergenceReport", "delta_exact", "pathwise_kl_estimate", "pinsker_tv", "thm1_bound", "thm2_bound",
    "EstimatorSpec", "KernelSpec", "tweedie_score",
    "Schedule", "corollary_alpha", "geometric_schedule", "uniform_schedule",
    "TargetModel", "atom_mixture", "gaussian_mixture", "isotropic_gaussian", "mmse", "mutual_information",
]
