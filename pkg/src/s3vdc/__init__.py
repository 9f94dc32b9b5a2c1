"""Variational deep clustering with a Gaussian-mixture latent prior.

Training follows three stages: low-weight gamma-training of the networks, a
one-shot mini-batch GMM initialization of the prior, and periodic polynomial
beta-annealing of the regularizer weight. Cluster responsibilities are
computed from min-max rescaled log densities so they cannot overflow.
"""
from .core import (
    MixturePrior,
    cluster_responsibilities,
    gaussian_log_density,
    inverse_min_max,
    reparameterize,
    sample_generative,
)
from .schedule import Phase, PhaseKind, TrainingSchedule, beta_at, phase_at, regularizer_weight_at
from .trainer import RunConfig, train

__version__ = "0.1.0"

__all__ = [
    "MixturePrior",
    "Phase",
    "PhaseKind",
    "RunConfig",
    "TrainingSchedule",
    "beta_at",
    "cluster_responsibilities",
    "gaussian_log_density",
    "inverse_min_max",
    "phase_at",
    "regularizer_weight_at",
    "reparameterize",
    "sample_generative",
    "train",
]
