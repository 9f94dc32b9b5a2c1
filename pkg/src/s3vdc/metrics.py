"""Clustering evaluation: matched accuracy, NMI, silhouette, CH, marginal NLL."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import silhouette_score

from .core import gaussian_log_density, reparameterize
from .errors import ContractError
from .objectives import reconstruction_loglik

SILHOUETTE_CAP = 10_000
CH_SENTINEL = 1e300
_LOG_2PI = math.log(2.0 * math.pi)


def _check_pair(pred, labels):
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    if pred.shape != labels.shape:
        raise ContractError(f"length mismatch: {len(pred)} predictions vs {len(labels)} labels")
    if len(pred) == 0:
        raise ContractError("need at least one sample")
    return pred, labels


def contingency(pred, labels) -> np.ndarray:
    _, p = np.unique(pred, return_inverse=True)
    _, y = np.unique(labels, return_inverse=True)
    table = np.zeros((p.max() + 1, y.max() + 1), dtype=np.int64)
    np.add.at(table, (p, y), 1)
    return table


def clustering_accuracy(pred, labels) -> float:
    """Fraction correct under the best one-to-one cluster-to-class mapping."""
    pred, labels = _check_pair(pred, labels)
    table = contingency(pred, labels)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / len(pred)


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, labels) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    pred, labels = _check_pair(pred, labels)
    table = contingency(pred, labels).astype(np.float64)
    n = table.sum()
    h_pred, h_true = _entropy(table.sum(1)), _entropy(table.sum(0))
    if h_pred == 0.0 and h_true == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    denom = 0.5 * (h_pred + h_true)
    return float(np.clip(max(mi, 0.0) / denom, 0.0, 1.0))


def _check_clusters(embeddings, pred):
    x = np.asarray(embeddings, dtype=np.float64)
    pred = np.asarray(pred).ravel()
    if x.ndim != 2 or len(x) != len(pred):
        raise ContractError(f"embeddings {x.shape} do not match {len(pred)} assignments")
    if len(np.unique(pred)) < 2:
        raise ContractError("metric undefined for a single cluster")
    return x, pred


def silhouette(embeddings, pred, cap: int = SILHOUETTE_CAP, seed: int = 0) -> float:
    """Mean Euclidean silhouette, on a seeded subsample of at most ``cap`` points."""
    x, pred = _check_clusters(embeddings, pred)
    if len(x) > cap:
        idx = np.random.default_rng(seed).choice(len(x), cap, replace=False)
        x, pred = x[idx], pred[idx]
        if len(np.unique(pred)) < 2:
            raise ContractError("subsample holds a single cluster")
    if len(np.unique(pred)) == len(pred):
        return 0.0
    return float(silhouette_score(x, pred, metric="euclidean"))


def calinski_harabasz(embeddings, pred) -> tuple:
    """Returns ``(score, degenerate)``; degenerate when within-cluster scatter is zero."""
    x, pred = _check_clusters(embeddings, pred)
    n = len(x)
    groups = np.unique(pred)
    k = len(groups)
    center = x.mean(0)
    between = within = 0.0
    for g in groups:
        members = x[pred == g]
        mu = members.mean(0)
        between += len(members) * float(((mu - center) ** 2).sum())
        within += float(((members - mu) ** 2).sum())
    if within <= 0.0 or n == k:
        return CH_SENTINEL, True
    return between * (n - k) / (within * (k - 1)), False


@torch.no_grad()
def marginal_nll(model, x: torch.Tensor, importance_samples: int = 128, batch_size: int = 512,
                 generator: Optional[torch.Generator] = None, normalizer: float = 1.0) -> float:
    """Importance-sampled -ln p(x) per sample, averaged over ``x``.

    Proposal is q(z|x); the prior is the exact mixture sum_c pi_c N(z|mu_c, var_c).
    """
    if importance_samples < 1:
        raise ContractError("importance_samples must be >= 1")
    model.eval()
    S = importance_samples
    logpi = model.prior.weights.log()
    total, n = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        mean, logvar = model.encode(xb)
        B, d = mean.shape
        eps = torch.randn((S, B, d), generator=generator, dtype=mean.dtype)
        z = reparameterize(mean.expand(S, B, d), logvar.expand(S, B, d), eps).reshape(S * B, d)
        log_q = (-0.5 * (_LOG_2PI + logvar.expand(S, B, d) + eps ** 2)).sum(-1).reshape(S * B)
        log_pz = torch.logsumexp(logpi.unsqueeze(1) + gaussian_log_density(z, model.prior), dim=0)
        dec = model.decode(z)
        xr = xb.unsqueeze(0).expand(S, *xb.shape).reshape(S * B, *xb.shape[1:])
        log_px = reconstruction_loglik(xr, dec, model.mode)
        log_w = (log_px + log_pz - log_q).reshape(S, B)
        ll = torch.logsumexp(log_w, dim=0) - math.log(S)
        total += float(-ll.double().sum())
        n += B
    return total / n / normalizer


@dataclass
class MetricsReport:
    silhouette: Optional[float]
    calinski_harabasz: Optional[float]
    cluster_sizes: list
    pi: list
    neg_log_px: Optional[float] = None
    accuracy: Optional[float] = None
    nmi: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "silhouette": self.silhouette,
            "calinski_harabasz": self.calinski_harabasz,
            "cluster_sizes": self.cluster_sizes,
            "pi": self.pi,
        }
        for key in ("accuracy", "nmi", "neg_log_px"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        d.update(self.extra)
        return d


def evaluate(model, x: torch.Tensor, labels=None, importance_samples: Optional[int] = 128,
             seed: int = 0) -> MetricsReport:
    pred, _ = model.predict(x)
    pred = pred.numpy()
    z = model.embed(x).numpy()
    sizes = np.bincount(pred, minlength=model.n_clusters).tolist()
    if len(np.unique(pred)) >= 2:
        sil = silhouette(z, pred, seed=seed)
        ch, degenerate = calinski_harabasz(z, pred)
    else:
        sil, ch, degenerate = None, None, True
    report = MetricsReport(sil, ch, sizes, model.prior.weights.tolist(),
                           extra={"silhouette_cap": SILHOUETTE_CAP, "ch_degenerate": degenerate})
    if importance_samples:
        gen = torch.Generator().manual_seed(seed)
        report.neg_log_px = marginal_nll(model, x, importance_samples, generator=gen)
        report.extra["neg_log_px_normalizer"] = 1.0
        report.extra["importance_samples"] = importance_samples
    if labels is not None:
        report.accuracy = clustering_accuracy(pred, labels)
        report.nmi = nmi(pred, labels)
    return report


def stability_report(runs) -> dict:
    """Per-metric sample mean and sample STD (n-1) across runs."""
    if len(runs) < 2:
        raise ContractError(f"need at least 2 runs, got {len(runs)}")
    dicts = [r.to_dict() if isinstance(r, MetricsReport) else dict(r) for r in runs]
    keys = [k for k in ("accuracy", "nmi", "silhouette", "calinski_harabasz", "neg_log_px")
            if all(k in d and d[k] is not None for d in dicts)]
    out = {}
    for k in keys:
        vals = np.array([d[k] for d in dicts], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)), "values": vals.tolist()}
    out["trials"] = len(dicts)
    return out
