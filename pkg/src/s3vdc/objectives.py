"""Loss terms of the denoising VaDE objective and their weighted composition."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .core import (
    DEFAULT_LAMBDA,
    MixturePrior,
    cluster_responsibilities,
    gaussian_log_density,
    inverse_min_max,
    reparameterize,
)
from .errors import ContractError, InputValidationError, NonFiniteLossError
from .networks import BERNOULLI, DecoderOutput

PROB_CLAMP = 1e-7
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl_categorical: torch.Tensor
    kl_gaussian: torch.Tensor
    regularizer_weight: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "recon": self.reconstruction.item(),
            "kl_cat": self.kl_categorical.item(),
            "kl_gauss": self.kl_gaussian.item(),
            "weight": float(self.regularizer_weight),
            "total": self.total.item(),
        }


def reconstruction_loglik(x: torch.Tensor, decoded: DecoderOutput, mode: str = BERNOULLI) -> torch.Tensor:
    """Per-sample log-likelihood ln p(x|z) of the clean ``x``, shape (L,)."""
    dims = tuple(range(1, x.ndim))
    if mode == BERNOULLI:
        if bool((x < 0).any()) or bool((x > 1).any()):
            raise InputValidationError("Bernoulli targets must lie in [0, 1]")
        p = decoded.mean.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        ll = x * p.log() + (1.0 - x) * torch.log1p(-p)
        return ll.sum(dim=dims)
    if decoded.log_variance is None:
        raise ContractError("Gaussian reconstruction needs a decoder log-variance")
    lv = decoded.log_variance
    ll = -0.5 * (_LOG_2PI + lv + (x - decoded.mean).pow(2) / lv.exp())
    return ll.sum(dim=dims)


def reconstruction_term(x: torch.Tensor, decoded: DecoderOutput, mode: str = BERNOULLI) -> torch.Tensor:
    """Batch mean of ln p(x|z): a single-sample estimate of the expected log-likelihood."""
    return reconstruction_loglik(x, decoded, mode).mean()


def kl_categorical(q: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(q(c|x) || Cat(pi)), with 0 ln 0 taken as 0."""
    per_sample = torch.xlogy(q, q) - q * weights.to(q.dtype).log().unsqueeze(0)
    return per_sample.sum(dim=1).mean()


def kl_gaussian_mixture(mean: torch.Tensor, log_variance: torch.Tensor, prior: MixturePrior,
                        q: torch.Tensor) -> torch.Tensor:
    """Batch mean of sum_c q_c KL(N(mean, exp(log_variance)) || N(mu_c, sigma_c^2))."""
    var_c = prior.variances.to(mean.dtype).unsqueeze(0)  # 1 x C x d
    mu_c = prior.means.to(mean.dtype).unsqueeze(0)
    m = mean.unsqueeze(1)  # L x 1 x d
    lv = log_variance.unsqueeze(1)
    kl = 0.5 * (var_c.log() - lv + lv.exp() / var_c + (m - mu_c).pow(2) / var_c - 1.0)
    return (q * kl.sum(dim=2)).sum(dim=1).mean()


def s3vdc_loss(model, x: torch.Tensor, x_hat: torch.Tensor, regularizer_weight: float,
               lam: float = DEFAULT_LAMBDA, generator: Optional[torch.Generator] = None,
               noise: Optional[torch.Tensor] = None, phase=None, step=None) -> LossBreakdown:
    """Weighted denoising VaDE loss for one mini-batch (a quantity to minimize).

    The encoder sees ``x_hat``; the decoder reconstructs the clean ``x``.
    Responsibilities always pass through the inverse min-max rescaling.
    """
    if not regularizer_weight > 0:
        raise ContractError(f"regularizer weight must be positive, got {regularizer_weight}")
    mean, log_variance = model.encode(x_hat)
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = reparameterize(mean, log_variance, noise)
    scores = inverse_min_max(gaussian_log_density(z, model.prior), lam)
    q = cluster_responsibilities(scores, model.prior.weights)
    recon = reconstruction_term(x, model.decode(z), model.mode)
    kl_cat = kl_categorical(q, model.prior.weights)
    kl_gauss = kl_gaussian_mixture(mean, log_variance, model.prior, q)
    total = -recon + regularizer_weight * (kl_cat + kl_gauss)
    out = LossBreakdown(recon, kl_cat, kl_gauss, regularizer_weight, total)
    if not bool(torch.isfinite(total)):
        raise NonFiniteLossError(
            f"non-finite loss at step {step} ({phase}): {out.as_floats()}",
            phase=phase, step=step, breakdown=out.as_floats())
    return out
