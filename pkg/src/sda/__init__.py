"""Score-based data assimilation: diffusion priors over trajectories built from
local window scores, zero-shot observation guidance and reference posteriors."""

from .composition import ComposedScore, compose_score
from .diffusion import DEFAULT_SCHEDULE, DiffusionSchedule, perturb, schedule_coefficients
from .guidance import GammaMatrix, PosteriorScore, sda_likelihood_score, dps_likelihood_score
from .sampling import SamplerConfig, sample
from .scorenet import NetworkConfig, NetworkScore, build_network

__all__ = [
    "ComposedScore", "compose_score", "DEFAULT_SCHEDULE", "DiffusionSchedule", "perturb",
    "schedule_coefficients", "GammaMatrix", "PosteriorScore", "sda_likelihood_score",
    "dps_likelihood_score", "SamplerConfig", "sample", "NetworkConfig", "NetworkScore", "build_network",
]
