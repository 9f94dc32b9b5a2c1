"""Hierarchical TOML run configuration with strict key checking.

Schema (section -> key: type, default; ``REQUIRED`` keys have no default)::

    [data]      source (str, REQUIRED), mode, grid, n, clusters, separation,
                activity_sigma, dim, seed, test_fraction
    [model]     clusters (REQUIRED), latent_dim (REQUIRED), architecture, hidden
    [schedule]  gamma, t_gamma, t_beta, t_static, periods (all REQUIRED), u, lambda
    [train]     batch_size, initial_lr, terminal_lr, noise_std, seed
    [gmm]       k, max_em_steps, tol, seed, n_init

``data.source`` is ``synthetic_behavior``, ``blobs``, a cache ``.npz`` file,
an IDX image directory or a timeseries directory.
"""
from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .schedule import TrainingSchedule
from .trainer import RunConfig

REQUIRED = object()

SCHEMA = {
    "data": {
        "source": (str, REQUIRED),
        "mode": (str, None),
        "grid": (bool, False),
        "n": (int, 20_000),
        "clusters": (int, 4),
        "separation": (float, 0.12),
        "activity_sigma": (float, 0.0),
        "dim": (int, 16),
        "seed": (int, 0),
        "test_fraction": (float, 0.1),
    },
    "model": {
        "clusters": (int, REQUIRED),
        "latent_dim": (int, REQUIRED),
        "architecture": (str, "mlp"),
        "hidden": (list, [128, 64]),
    },
    "schedule": {
        "gamma": (float, REQUIRED),
        "t_gamma": (int, REQUIRED),
        "t_beta": (int, REQUIRED),
        "t_static": (int, REQUIRED),
        "periods": (int, REQUIRED),
        "u": (int, 3),
        "lambda": (float, 50.0),
    },
    "train": {
        "batch_size": (int, 128),
        "initial_lr": (float, 2e-3),
        "terminal_lr": (float, 1e-6),
        "noise_std": (float, 5e-9),
        "seed": (int, 0),
    },
    "gmm": {
        "k": (int, 32),
        "max_em_steps": (int, 10_000),
        "tol": (float, 1e-3),
        "seed": (int, None),
        "n_init": (int, 5),
    },
}


def _coerce(section, key, value, typ):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise TypeError(f"{section}.{key}: expected {typ.__name__}, got {type(value).__name__} {value!r}")
    return value


def validate(doc: dict) -> dict:
    """Fill defaults and check every key; raises ConfigError listing all problems."""
    problems, out = [], {}
    for section in doc:
        if section not in SCHEMA:
            problems.append(f"{section}: unknown section")
    for section, keys in SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"{section}: must be a table")
            continue
        for key in given:
            if key not in keys:
                problems.append(f"{section}.{key}: unknown key")
        resolved = {}
        for key, (typ, default) in keys.items():
            if key in given and given[key] is None and default is None:
                resolved[key] = None
            elif key in given:
                try:
                    resolved[key] = _coerce(section, key, given[key], typ)
                except TypeError as exc:
                    problems.append(str(exc))
            elif default is REQUIRED:
                problems.append(f"{section}.{key}: missing required key")
            else:
                resolved[key] = copy.deepcopy(default)
        out[section] = resolved
    if not problems:
        try:
            to_run_config(out)
        except Exception as exc:  # constraint violations from the dataclasses
            problems.append(str(exc))
        if not 0 < out["data"]["test_fraction"] < 1:
            problems.append("data.test_fraction: must be in (0, 1)")
        if out["model"]["architecture"] not in ("mlp", "cnn"):
            problems.append("model.architecture: must be 'mlp' or 'cnn'")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return out


def load(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return validate(doc)


def to_run_config(cfg: dict, seed=None, n_clusters=None, checkpoint_dir=None) -> RunConfig:
    s, m, t, g = cfg["schedule"], cfg["model"], cfg["train"], cfg["gmm"]
    schedule = TrainingSchedule(s["gamma"], s["t_gamma"], s["t_beta"], s["t_static"], s["periods"],
                                s["u"], s["lambda"])
    arch = {"kind": m["architecture"]}
    if m["architecture"] == "mlp":
        arch["hidden"] = list(m["hidden"])
    return RunConfig(
        schedule=schedule,
        batch_size=t["batch_size"],
        latent_dim=m["latent_dim"],
        n_clusters=m["clusters"] if n_clusters is None else n_clusters,
        initial_lr=t["initial_lr"],
        terminal_lr=t["terminal_lr"],
        noise_std=t["noise_std"],
        seed=t["seed"] if seed is None else seed,
        gmm_k=g["k"],
        gmm_max_em_steps=g["max_em_steps"],
        gmm_tol=g["tol"],
        gmm_seed=g["seed"],
        gmm_n_init=g["n_init"],
        architecture=arch,
        dataset=cfg["data"]["source"],
        checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir),
    )


def build_dataset(cfg: dict):
    from . import data

    d = cfg["data"]
    if d["source"] == "synthetic_behavior":
        ds = data.synthetic_behavior(d["n"], d["clusters"], d["seed"], separation=d["separation"],
                                     activity_sigma=d["activity_sigma"])
    elif d["source"] == "blobs":
        ds = data.gaussian_blobs(d["n"], d["clusters"], d["dim"], d["seed"])
    else:
        ds = data.load_dataset(d["source"], d["mode"], d["grid"])
    if d["mode"] is not None and ds.mode != d["mode"]:
        ds = data.Dataset(ds.samples, ds.labels, d["mode"], ds.name, ds.meta)
    return ds


def train_test(cfg: dict):
    from .data import split

    return split(build_dataset(cfg), cfg["data"]["test_fraction"], cfg["data"]["seed"])
