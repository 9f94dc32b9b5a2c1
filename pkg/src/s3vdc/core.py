"""Model math for the Gaussian-mixture latent prior.

Everything here works on torch tensors so gradients flow through the
responsibilities into the encoder and the prior parameters.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import torch
from torch import nn

from .errors import ContractError, NumericsError

VAR_FLOOR = 1e-6
PI_FLOOR = 1e-10
RANGE_EPSILON = 1e-12
DEFAULT_LAMBDA = 50.0

_LOG_2PI = math.log(2.0 * math.pi)


class MixturePrior(nn.Module):
    """Trainable GMM prior p(c) p(z|c) over the latent space.

    Stored unconstrained: cluster logits, means and log-variances. The public
    ``weights`` and ``variances`` apply the floors so every consumer sees a
    valid mixture.
    """

    def __init__(self, n_clusters: int, latent_dim: int, dtype=torch.float32):
        super().__init__()
        if n_clusters < 1 or latent_dim < 1:
            raise ContractError(
                f"need n_clusters >= 1 and latent_dim >= 1, got {n_clusters}, {latent_dim}"
            )
        self.logits = nn.Parameter(torch.zeros(n_clusters, dtype=dtype))
        self.means = nn.Parameter(torch.zeros(n_clusters, latent_dim, dtype=dtype))
        self.log_variances = nn.Parameter(torch.zeros(n_clusters, latent_dim, dtype=dtype))

    @property
    def n_clusters(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> torch.Tensor:
        pi = torch.softmax(self.logits, dim=0).clamp_min(PI_FLOOR)
        return pi / pi.sum()

    @property
    def variances(self) -> torch.Tensor:
        return self.log_variances.exp().clamp_min(VAR_FLOOR)

    @classmethod
    def from_arrays(cls, weights, means, variances, dtype=torch.float32) -> "MixturePrior":
        means = torch.as_tensor(means, dtype=dtype)
        if means.ndim != 2:
            raise ContractError(f"means must be C x d_z, got shape {tuple(means.shape)}")
        prior = cls(means.shape[0], means.shape[1], dtype=dtype)
        prior.assign(weights, means, variances)
        return prior

    @torch.no_grad()
    def assign(self, weights, means, variances) -> None:
        """Overwrite the parameters in place (used by GMM initialization)."""
        w = torch.as_tensor(weights, dtype=torch.float64)
        m = torch.as_tensor(means, dtype=torch.float64)
        v = torch.as_tensor(variances, dtype=torch.float64)
        if w.shape != (self.n_clusters,) or m.shape != self.means.shape or v.shape != self.means.shape:
            raise ContractError(
                f"shape mismatch installing prior: weights {tuple(w.shape)}, means "
                f"{tuple(m.shape)}, variances {tuple(v.shape)} vs ({self.n_clusters}, {self.latent_dim})"
            )
        if not (torch.isfinite(w).all() and torch.isfinite(m).all() and torch.isfinite(v).all()):
            raise NumericsError("non-finite mixture parameters")
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-6:
            raise ContractError("weights must lie on the probability simplex")
        w = w.clamp_min(PI_FLOOR)
        w = w / w.sum()
        self.logits.copy_(w.log().to(self.logits.dtype))
        self.means.copy_(m.to(self.means.dtype))
        self.log_variances.copy_(v.clamp_min(VAR_FLOOR).log().to(self.log_variances.dtype))

    @torch.no_grad()
    def check_invariants(self) -> None:
        pi, var = self.weights, self.variances
        if abs(float(pi.sum()) - 1.0) > 1e-6 or float(pi.min()) < PI_FLOOR * (1 - 1e-6):
            raise ContractError("mixture weights off the simplex or below floor")
        if float(var.min()) < VAR_FLOOR * (1 - 1e-6):
            raise ContractError("mixture variance below floor")
        if not torch.isfinite(self.means).all():
            raise NumericsError("non-finite mixture means")


def reparameterize(mean: torch.Tensor, log_variance: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z = mean + exp(log_variance / 2) * noise."""
    if mean.shape != log_variance.shape or mean.shape != noise.shape:
        raise ContractError(
            f"shape mismatch: mean {tuple(mean.shape)}, log_variance "
            f"{tuple(log_variance.shape)}, noise {tuple(noise.shape)}"
        )
    return mean + torch.exp(0.5 * log_variance) * noise


def gaussian_log_density(z: torch.Tensor, prior: MixturePrior) -> torch.Tensor:
    """Per-cluster diagonal Gaussian log density ln p(z|c), shape (C, L)."""
    if z.ndim != 2 or z.shape[1] != prior.latent_dim:
        raise ContractError(f"z must be L x {prior.latent_dim}, got {tuple(z.shape)}")
    finite = torch.isfinite(z).all(dim=1)
    if not bool(finite.all()):
        bad = int((~finite).nonzero()[0, 0])
        raise NumericsError(f"non-finite latent vector at batch index {bad}")
    mu = prior.means.to(z.dtype)
    var = prior.variances.to(z.dtype)
    diff = z.unsqueeze(0) - mu.unsqueeze(1)  # C x L x d
    per_dim = -0.5 * _LOG_2PI - 0.5 * var.log().unsqueeze(1) - diff.pow(2) / (2.0 * var.unsqueeze(1))
    return per_dim.sum(dim=2)


def inverse_min_max(values: torch.Tensor, lam: float = DEFAULT_LAMBDA,
                    range_epsilon: float = RANGE_EPSILON) -> torch.Tensor:
    """Rescale a log-density matrix affinely onto [0, lam].

    min and max range over every entry of the matrix. A matrix with no spread
    carries no cluster signal and maps to zeros.
    """
    if not lam > 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    lo = values.min()
    span = values.max() - lo
    if float(span.detach()) < range_epsilon:
        return torch.zeros_like(values)
    return lam * (values - lo) / span


def cluster_responsibilities(scores: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """q(c|x) from (C, L) log-density scores and cluster weights; returns (L, C)."""
    if scores.ndim != 2 or scores.shape[0] != weights.shape[0]:
        raise ContractError(
            f"scores must be C x L with C={weights.shape[0]}, got {tuple(scores.shape)}"
        )
    logits = weights.to(scores.dtype).log().unsqueeze(1) + scores
    return torch.softmax(logits, dim=0).transpose(0, 1)


@torch.no_grad()
def sample_generative(prior: MixturePrior, decoder: Callable[[torch.Tensor], torch.Tensor],
                      count: int, cluster: Optional[int] = None,
                      generator: Optional[torch.Generator] = None):
    """Draw ``count`` samples through the generative path.

    Returns ``(x, clusters)`` where ``x`` is the decoder mean for each latent
    draw and ``clusters`` the component each draw came from.
    """
    if count < 0:
        raise ContractError(f"count must be non-negative, got {count}")
    C = prior.n_clusters
    if cluster is not None and not 0 <= cluster < C:
        raise ContractError(f"cluster index {cluster} out of range [0, {C})")
    if cluster is None:
        clusters = torch.multinomial(prior.weights.float(), count, replacement=True,
                                     generator=generator) if count else torch.zeros(0, dtype=torch.long)
    else:
        clusters = torch.full((count,), cluster, dtype=torch.long)
    mu = prior.means[clusters]
    std = prior.variances[clusters].sqrt()
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + std * eps
    return decoder(z), clusters
