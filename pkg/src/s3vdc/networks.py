"""Encoder/decoder networks and the assembled clustering model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .core import MixturePrior, cluster_responsibilities, gaussian_log_density, inverse_min_max
from .errors import ContractError

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
LOGVAR_LIMIT = 30.0
DECODER_LOGVAR_MIN = -6.0


@dataclass
class DecoderOutput:
    mean: torch.Tensor
    log_variance: Optional[torch.Tensor] = None


class MLPEncoder(nn.Module):
    def __init__(self, input_dim: int, hidden: Sequence[int], latent_dim: int):
        super().__init__()
        layers, width = [], input_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.body = nn.Sequential(nn.Flatten(), *layers)
        self.mean = nn.Linear(width, latent_dim)
        self.log_variance = nn.Linear(width, latent_dim)

    def forward(self, x):
        h = self.body(x)
        return self.mean(h), self.log_variance(h)


class MLPDecoder(nn.Module):
    def __init__(self, latent_dim: int, hidden: Sequence[int], output_shape: Sequence[int]):
        super().__init__()
        self.output_shape = tuple(output_shape)
        layers, width = [], latent_dim
        for h in reversed(list(hidden)):
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, math.prod(self.output_shape)))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(z).reshape(z.shape[0], *self.output_shape)


class ConvEncoder(nn.Module):
    """Three strided convolutions (32/64/128) over a 28x28 channels-last grid."""

    def __init__(self, channels: int, latent_dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, 32, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(32, 64, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(64, 128, 3, stride=2), nn.ReLU(),
            nn.Flatten(),
        )
        self.mean = nn.Linear(128 * 3 * 3, latent_dim)
        self.log_variance = nn.Linear(128 * 3 * 3, latent_dim)

    def forward(self, x):
        h = self.body(x.permute(0, 3, 1, 2))
        return self.mean(h), self.log_variance(h)


class ConvDecoder(nn.Module):
    def __init__(self, latent_dim: int, channels: int):
        super().__init__()
        self.fc = nn.Sequential(nn.Linear(latent_dim, 128 * 3 * 3), nn.ReLU())
        self.body = nn.Sequential(
            nn.ConvTranspose2d(128, 64, 3, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(64, 32, 5, stride=2, padding=2, output_padding=1), nn.ReLU(),
            nn.ConvTranspose2d(32, channels, 5, stride=2, padding=2, output_padding=1),
        )

    def forward(self, z):
        h = self.fc(z).reshape(z.shape[0], 128, 3, 3)
        return self.body(h).permute(0, 2, 3, 1)


def build_networks(architecture: dict, input_shape: Sequence[int], latent_dim: int):
    kind = architecture.get("kind", "mlp")
    if kind == "mlp":
        hidden = architecture.get("hidden", [256, 128])
        return (MLPEncoder(math.prod(input_shape), hidden, latent_dim),
                MLPDecoder(latent_dim, hidden, input_shape))
    if kind == "cnn":
        if len(input_shape) != 3 or tuple(input_shape[:2]) != (28, 28):
            raise ContractError(f"cnn architecture expects 28x28xC input, got {tuple(input_shape)}")
        return ConvEncoder(input_shape[2], latent_dim), ConvDecoder(latent_dim, input_shape[2])
    raise ContractError(f"unknown architecture kind {kind!r}")


class S3VDCModel(nn.Module):
    """VAE with a trainable Gaussian-mixture prior over the latent space."""

    def __init__(self, input_shape: Sequence[int], latent_dim: int, n_clusters: int,
                 mode: str = BERNOULLI, architecture: Optional[dict] = None):
        super().__init__()
        if mode not in (BERNOULLI, GAUSSIAN):
            raise ContractError(f"unknown observation mode {mode!r}")
        self.input_shape = tuple(input_shape)
        self.mode = mode
        self.architecture = dict(architecture or {"kind": "mlp"})
        self.encoder, self.decoder = build_networks(self.architecture, self.input_shape, latent_dim)
        self.prior = MixturePrior(n_clusters, latent_dim)
        if mode == GAUSSIAN:
            self.decoder_log_variance = nn.Parameter(torch.zeros(self.input_shape))
        with torch.no_grad():
            self.prior.means.normal_()

    @property
    def latent_dim(self) -> int:
        return self.prior.latent_dim

    @property
    def n_clusters(self) -> int:
        return self.prior.n_clusters

    def encode(self, x):
        mean, log_variance = self.encoder(x)
        return mean, log_variance.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)

    def decode(self, z) -> DecoderOutput:
        out = self.decoder(z)
        if self.mode == BERNOULLI:
            return DecoderOutput(torch.sigmoid(out))
        logvar = self.decoder_log_variance.clamp_min(DECODER_LOGVAR_MIN).expand_as(out)
        return DecoderOutput(out, logvar)

    def decode_mean(self, z):
        return self.decode(z).mean

    def responsibilities(self, z, lam: float = 50.0):
        return cluster_responsibilities(
            inverse_min_max(gaussian_log_density(z, self.prior), lam), self.prior.weights)

    @torch.no_grad()
    def embed(self, x, batch_size: int = 4096):
        """Posterior means for a full array, in batches."""
        out = [self.encode(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return torch.cat(out) if out else torch.zeros(0, self.latent_dim)

    @torch.no_grad()
    def predict(self, x, batch_size: int = 4096):
        """Hard cluster assignment and the max responsibility, from posterior means.

        Uses exact posteriors p(c|z) (no rescaling) since the matrix-wide
        min/max would otherwise couple the samples of a batch.
        """
        z = self.embed(x, batch_size)
        scores = self.prior.weights.log().unsqueeze(1) + gaussian_log_density(z, self.prior)
        q = torch.softmax(scores, dim=0).T
        conf, labels = q.max(dim=1)
        return labels, conf
