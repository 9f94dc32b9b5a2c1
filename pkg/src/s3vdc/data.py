"""Dataset ingestion, preprocessing and synthetic data generators."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import IngestionError
from .networks import BERNOULLI, GAUSSIAN

GRID = 28
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    samples: np.ndarray  # float32, N x shape
    labels: Optional[np.ndarray] = None
    mode: str = BERNOULLI
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        validate(self)

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    @property
    def n_classes(self) -> Optional[int]:
        return None if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, samples=self.samples[idx], labels=labels, meta=dict(self.meta))

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.samples)


def validate(ds: Dataset) -> None:
    x = ds.samples
    if len(x) == 0:
        raise IngestionError(f"{ds.name}: empty dataset")
    flat = x.reshape(len(x), -1)
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        raise IngestionError(f"{ds.name}: non-finite values in record {int(np.flatnonzero(bad)[0])}")
    if ds.mode == BERNOULLI:
        out = (flat < 0).any(axis=1) | (flat > 1).any(axis=1)
        if out.any():
            raise IngestionError(f"{ds.name}: record {int(np.flatnonzero(out)[0])} outside [0, 1]")
    elif ds.mode != GAUSSIAN:
        raise IngestionError(f"unknown mode {ds.mode!r}")
    if ds.labels is not None:
        if ds.labels.shape != (len(x),):
            raise IngestionError(f"{ds.name}: {len(ds.labels)} labels for {len(x)} samples")
        if ds.labels.min() < 0:
            raise IngestionError(f"{ds.name}: negative label in record {int(np.argmin(ds.labels))}")


# -- readers -----------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise IngestionError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[raw[2]], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise IngestionError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    codes = {np.dtype(np.uint8): 0x08, np.dtype(">f4"): 0x0D}
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        arr = arr.astype(">f4")
    if arr.dtype not in codes:
        raise IngestionError(f"cannot write dtype {arr.dtype} as IDX")
    header = bytes([0, 0, codes[arr.dtype], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def _find(root: Path, stem: str) -> Optional[Path]:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    return None


def load_idx_images(root, name: str = "mnist") -> Dataset:
    """Load MNIST/Fashion-style IDX files (train and t10k concatenated) from a directory."""
    root = Path(root)
    xs, ys = [], []
    for split in ("train", "t10k"):
        img = _find(root, f"{split}-images-idx3-ubyte")
        lab = _find(root, f"{split}-labels-idx1-ubyte")
        if img is None:
            continue
        x = read_idx(img)
        if x.ndim != 3 or x.shape[1:] != (GRID, GRID):
            raise IngestionError(f"{img}: expected N x 28 x 28 images, got {x.shape}")
        xs.append(x)
        if lab is not None:
            y = read_idx(lab)
            if len(y) != len(x):
                raise IngestionError(f"{lab}: {len(y)} labels for {len(x)} images")
            ys.append(y)
    if not xs:
        raise IngestionError(f"{root}: no IDX image files found")
    x = np.concatenate(xs).astype(np.float32)[..., None] / 255.0
    y = np.concatenate(ys) if len(ys) == len(xs) else None
    return Dataset(x, y, BERNOULLI, name)


def _read_table(path: Path) -> np.ndarray:
    delim = "," if path.suffix == ".csv" else None
    try:
        return np.loadtxt(path, delimiter=delim, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def load_timeseries(root, name: str = "timeseries") -> Dataset:
    """Multichannel series: one N x T table per channel, plus optional labels.

    The directory holds ``*.csv`` / ``*.txt`` channel tables (sorted by file
    name) and an optional ``labels.*`` file with one integer per row. Signals
    are zero-centred per channel.
    """
    root = Path(root)
    files = sorted(p for p in root.iterdir() if p.suffix in (".csv", ".txt") and not p.stem.startswith("labels"))
    if not files:
        raise IngestionError(f"{root}: no channel tables found")
    channels = [_read_table(p) for p in files]
    shape = channels[0].shape
    for p, c in zip(files, channels):
        if c.shape != shape:
            raise IngestionError(f"{p}: shape {c.shape} differs from {files[0].name} {shape}")
    x = np.stack(channels, axis=1)  # N x channels x T
    bad = ~np.isfinite(x).all(axis=(1, 2))
    if bad.any():
        raise IngestionError(f"{root}: non-finite value in record {int(np.flatnonzero(bad)[0])}")
    x = x - x.mean(axis=(0, 2), keepdims=True)
    labels = None
    lab = [p for p in root.iterdir() if p.stem == "labels"]
    if lab:
        labels = _read_table(lab[0]).ravel().astype(np.int64)
        labels = labels - labels.min()
    return Dataset(x.astype(np.float32), labels, GAUSSIAN, name, {"layout": "timeseries"})


def to_grid(series: np.ndarray, size: int = GRID) -> np.ndarray:
    """Zero-pad an N x channels x T batch to a square per channel and resize bilinearly.

    Each channel's length-T signal is laid out row-major on the smallest
    square that holds it, zero padded, then interpolated to ``size x size``.
    Returns N x size x size x channels.
    """
    n, ch, t = series.shape
    side = int(np.ceil(np.sqrt(t)))
    padded = np.zeros((n, ch, side * side), dtype=np.float32)
    padded[:, :, :t] = series
    img = torch.from_numpy(padded.reshape(n, ch, side, side))
    out = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
    return out.permute(0, 2, 3, 1).contiguous().numpy()


def load_dataset(source, mode: Optional[str] = None, grid: bool = False) -> Dataset:
    """Load a dataset from a cache file, an IDX directory or a timeseries directory."""
    path = Path(source)
    if path.is_file() and path.suffix == ".npz":
        ds = load_cache(path)
    elif path.is_dir() and (_find(path, "train-images-idx3-ubyte") or _find(path, "t10k-images-idx3-ubyte")):
        ds = load_idx_images(path, path.name.lower())
    elif path.is_dir():
        ds = load_timeseries(path, path.name.lower())
    else:
        raise IngestionError(f"{source}: unknown dataset layout")
    if grid and ds.meta.get("layout") == "timeseries":
        ds = replace(ds, samples=to_grid(ds.samples), meta={**ds.meta, "layout": "grid"})
    if mode is not None and mode != ds.mode:
        ds = replace(ds, mode=mode)
    return ds


# -- cache -------------------------------------------------------------------

def save_cache(ds: Dataset, path) -> None:
    """Write samples/labels as .npy members (shape header + row-major values) of one .npz."""
    arrays = {"samples": ds.samples}
    if ds.labels is not None:
        arrays["labels"] = ds.labels
    info = json.dumps({"name": ds.name, "mode": ds.mode, "meta": ds.meta})
    np.savez(path, info=np.array(info), **arrays)


def load_cache(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        info = json.loads(str(z["info"]))
        labels = z["labels"] if "labels" in z.files else None
        return Dataset(z["samples"], labels, info["mode"], info["name"], info["meta"])


# -- synthetic generators ----------------------------------------------------

BEHAVIOR_CHANNELS = 8
BEHAVIOR_DAYS = 30


def behavior_counts(n: int, clusters: int, seed: int, separation: float = 1.0,
                    noise_shape: float = 8.0, concentration: float = 8.0, activity_sigma: float = 0.0):
    """Daily action counts for ``n`` synthetic players drawn from latent archetypes.

    Each archetype deviates from a common log-rate of ln 4 by a per-channel
    offset, a weekly oscillation and a linear trend; ``separation`` scales the
    whole deviation, so it alone controls how much archetypes overlap.
    Per-player activity and per-day gamma noise multiply the rate before
    Poisson sampling. Returns ``(counts, labels, weights)``.
    """
    if clusters < 1 or n < clusters:
        raise ValueError(f"need n >= clusters >= 1, got n={n}, clusters={clusters}")
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.full(clusters, concentration))
    labels = rng.choice(clusters, size=n, p=weights)
    days = np.arange(BEHAVIOR_DAYS)
    shape = (clusters, BEHAVIOR_CHANNELS, 1)
    offset = rng.normal(size=shape)
    weekly = rng.uniform(size=shape) * np.sin(2 * np.pi * days / 7 + rng.uniform(0, 2 * np.pi, size=shape))
    trend = rng.normal(size=shape) * (days / BEHAVIOR_DAYS - 0.5)
    profiles = np.exp(np.log(4.0) + separation * (offset + weekly + trend))  # clusters x channels x days
    activity = rng.lognormal(sigma=activity_sigma, size=(n, 1, 1))
    daily = rng.gamma(noise_shape, 1.0 / noise_shape, size=(n, BEHAVIOR_CHANNELS, BEHAVIOR_DAYS))
    counts = rng.poisson(profiles[labels] * activity * daily)
    return counts.astype(np.float32), labels, weights


def synthetic_behavior(n: int, clusters: int, seed: int, **kwargs) -> Dataset:
    """8-channel x 30-day behavioural series, log1p-scaled and zero-centred per channel."""
    counts, labels, weights = behavior_counts(n, clusters, seed, **kwargs)
    x = np.log1p(counts)
    x = x - x.mean(axis=(0, 2), keepdims=True)
    return Dataset(x, labels, GAUSSIAN, "synthetic_behavior",
                   {"layout": "timeseries", "weights": weights.tolist(), "seed": seed})


def gaussian_blobs(n: int, clusters: int, dim: int, seed: int, spread: float = 1.0,
                   separation: float = 6.0) -> Dataset:
    """Isotropic Gaussian blobs with equal-probability labels."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation / np.sqrt(2), size=(clusters, dim))
    labels = rng.integers(clusters, size=n)
    x = centers[labels] + spread * rng.normal(size=(n, dim))
    return Dataset(x.astype(np.float32), labels, GAUSSIAN, "blobs", {"centers": centers.tolist()})


def split(ds: Dataset, test_fraction: float, seed: int):
    """Seeded disjoint split; stratified by label when labels exist."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    n = len(ds)
    if ds.labels is None:
        perm = rng.permutation(n)
        n_test = int(round(test_fraction * n))
        test_idx = perm[:n_test]
    else:
        test_idx = []
        for c in np.unique(ds.labels):
            members = rng.permutation(np.flatnonzero(ds.labels == c))
            test_idx.append(members[:int(round(test_fraction * len(members)))])
        test_idx = np.concatenate(test_idx)
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))
