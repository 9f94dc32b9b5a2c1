"""Mini-batch GMM initialization of the mixture prior.

Only ``subsample_size`` (k x L) rows of the dataset are embedded and fitted,
so the cost does not grow with the dataset size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp

from .core import PI_FLOOR, VAR_FLOOR, MixturePrior
from .errors import ContractError, InitializationError, NumericsError

log = logging.getLogger(__name__)

MAX_RESEEDS = 10


@dataclass
class GmmFitConfig:
    components: int
    subsample_size: int
    max_em_steps: int = 10_000
    convergence_tol: float = 1e-3
    seed: int = 0
    n_init: int = 5
    kmeans_steps: int = 20
    debug: bool = False

    def validate(self, latent_dim: int) -> None:
        if self.components < 1:
            raise ContractError(f"components must be >= 1, got {self.components}")
        if self.subsample_size < self.components * latent_dim:
            raise ContractError(
                f"subsample_size={self.subsample_size} must be >= components*d_z="
                f"{self.components * latent_dim}")
        if self.max_em_steps < 1:
            raise ContractError("max_em_steps must be >= 1")
        if self.n_init < 1:
            raise ContractError("n_init must be >= 1")


@dataclass
class EmResult:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list = field(default_factory=list)  # mean per-row, one entry per E-step
    n_iter: int = 0
    reseeds: int = 0
    converged: bool = False


def collect_latents(model, samples, subsample_size: int, seed: int, batch_size: int = 4096) -> np.ndarray:
    """Posterior means of a seeded uniform subsample (without replacement)."""
    n = len(samples)
    if subsample_size > n:
        log.warning("subsample_size %d exceeds dataset size %d; using all rows", subsample_size, n)
        subsample_size = n
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=subsample_size, replace=False)
    x = samples[torch.as_tensor(idx)] if isinstance(samples, torch.Tensor) else torch.as_tensor(samples[idx])
    was_training = model.training
    model.eval()
    z = model.embed(x, batch_size)
    model.train(was_training)
    return z.double().numpy()


def _log_prob(Z, weights, means, variances):
    # N x C matrix of ln pi_c + ln N(z | mu_c, diag var_c)
    diff2 = (Z[:, None, :] - means[None]) ** 2 / variances[None]
    ll = -0.5 * (np.log(2 * np.pi) * Z.shape[1] + np.log(variances).sum(1)[None] + diff2.sum(2))
    return ll + np.log(weights)[None]


def _seed_means(Z, C, rng, lloyd_steps=0):
    """k-means++ D^2 seeding, optionally refined by a few Lloyd iterations."""
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    d2 = ((Z - centers[0]) ** 2).sum(1)
    for _ in range(1, C):
        total = d2.sum()
        j = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(Z[j])
        d2 = np.minimum(d2, ((Z - Z[j]) ** 2).sum(1))
    centers = np.array(centers)
    for _ in range(lloyd_steps):
        assign = ((Z[:, None, :] - centers[None]) ** 2).sum(2).argmin(1)
        for c in range(C):
            members = Z[assign == c]
            if len(members):
                centers[c] = members.mean(0)
    return centers


def em_diagonal(Z, config: GmmFitConfig) -> EmResult:
    """Best of ``n_init`` seeded EM runs, by final mean log-likelihood."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or not np.isfinite(Z).all():
        raise NumericsError("latent matrix must be a finite 2-D array")
    config.validate(Z.shape[1])
    rng = np.random.default_rng(config.seed)
    best = None
    for _ in range(config.n_init):
        res = _em_run(Z, config, rng)
        if best is None or res.log_likelihood[-1] > best.log_likelihood[-1]:
            best = res
    return best


def _em_run(Z, config: GmmFitConfig, rng) -> EmResult:
    """One diagonal-covariance EM run with component reseeding on collapse."""
    n, d = Z.shape
    C = config.components
    means = _seed_means(Z, C, rng, config.kmeans_steps)
    variances = np.tile(np.maximum(Z.var(0), VAR_FLOOR), (C, 1))
    weights = np.full(C, 1.0 / C)
    result = EmResult(weights, means, variances)
    prev = -np.inf
    for it in range(1, config.max_em_steps + 1):
        logp = _log_prob(Z, weights, means, variances)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        if config.debug and ll < prev - 1e-8:
            raise AssertionError(f"EM log-likelihood decreased at iteration {it}: {prev} -> {ll}")
        result.log_likelihood.append(ll)
        result.n_iter = it
        if it > 1 and ll - prev < config.convergence_tol:
            result.converged = True
            break
        prev = ll

        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(0)
        weights = nk / n
        collapsed = np.flatnonzero(weights < PI_FLOOR)
        safe = np.maximum(nk, np.finfo(float).tiny)
        means = resp.T @ Z / safe[:, None]
        variances = np.stack([resp[:, c] @ (Z - means[c]) ** 2 for c in range(C)]) / safe[:, None]
        variances = np.maximum(variances, VAR_FLOOR)
        if len(collapsed):
            result.reseeds += len(collapsed)
            if result.reseeds > MAX_RESEEDS:
                raise InitializationError(f"GMM components collapsed {result.reseeds} times")
            log.warning("reseeding collapsed GMM components %s", collapsed.tolist())
            for c in collapsed:
                means[c] = Z[rng.integers(n)]
                variances[c] = np.maximum(Z.var(0), VAR_FLOOR)
            weights = np.maximum(weights, 1.0 / n)
            weights /= weights.sum()
            prev = -np.inf  # monotonicity restarts after a reseed
        result.weights, result.means, result.variances = weights, means, variances
    return result


def fit_gmm(Z, config: GmmFitConfig) -> MixturePrior:
    res = em_diagonal(Z, config)
    return MixturePrior.from_arrays(res.weights, res.means, res.variances)


def initialize_prior(model, samples, config: GmmFitConfig, batch_size: int = 4096) -> EmResult:
    """Embed a subsample, fit the GMM and install it into ``model.prior``."""
    Z = collect_latents(model, samples, config.subsample_size, config.seed, batch_size)
    res = em_diagonal(Z, config)
    model.prior.assign(res.weights, res.means, res.variances)
    log.info("GMM init: %d rows, %d EM iterations, mean log-lik %.4f",
             len(Z), res.n_iter, res.log_likelihood[-1])
    return res
