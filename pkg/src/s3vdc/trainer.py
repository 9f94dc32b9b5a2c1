"""End-to-end training: gamma-training, GMM initialization, periodic annealing."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .core import DEFAULT_LAMBDA
from .errors import ConfigError, ContractError, NonFiniteLossError
from .gmm_init import GmmFitConfig, initialize_prior
from .networks import S3VDCModel
from .objectives import s3vdc_loss
from .schedule import Phase, PhaseKind, TrainingSchedule, phase_at, phase_boundaries, regularizer_weight_at

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "phase", "weight", "recon", "kl_cat", "kl_gauss", "total", "lr"]


@dataclass
class RunConfig:
    schedule: TrainingSchedule
    batch_size: int = 128
    latent_dim: int = 8
    n_clusters: int = 10
    initial_lr: float = 2e-3
    terminal_lr: float = 1e-6
    noise_std: float = 5e-9
    seed: int = 0
    gmm_k: int = 200
    gmm_max_em_steps: int = 10_000
    gmm_tol: float = 1e-3
    gmm_seed: Optional[int] = None
    gmm_n_init: int = 5
    architecture: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [256, 128]})
    dataset: str = ""
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        problems = []
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size} must be >= 1")
        if not self.initial_lr > self.terminal_lr > 0:
            problems.append(f"need initial_lr > terminal_lr > 0 (got {self.initial_lr}, {self.terminal_lr})")
        if self.n_clusters < 2:
            problems.append(f"n_clusters={self.n_clusters} must be >= 2")
        if self.latent_dim < 1:
            problems.append(f"latent_dim={self.latent_dim} must be >= 1")
        if self.noise_std < 0:
            problems.append(f"noise_std={self.noise_std} must be >= 0")
        if self.gmm_k < 1:
            problems.append(f"gmm_k={self.gmm_k} must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    def gmm_config(self) -> GmmFitConfig:
        seed = self.seed if self.gmm_seed is None else self.gmm_seed
        return GmmFitConfig(self.n_clusters, self.gmm_k * self.batch_size, self.gmm_max_em_steps,
                            self.gmm_tol, seed, self.gmm_n_init)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["schedule"] = TrainingSchedule(**d["schedule"])
        return cls(**d)

    def run_id(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "checkpoint_dir"},
                          sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()


@dataclass
class CheckpointBundle:
    model: S3VDCModel
    step: int
    config: RunConfig
    optimizer_state: Optional[dict] = None
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # one dict per step


def corrupt(x: torch.Tensor, noise_std: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """x + N(0, noise_std^2) noise; ``x`` itself is left untouched."""
    if noise_std < 0:
        raise ContractError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0:
        return x.clone()
    return x + noise_std * torch.randn(x.shape, generator=generator, dtype=x.dtype)


def learning_rate_at(t: int, config: RunConfig) -> float:
    """Per-step exponential decay from initial_lr (t=1) to terminal_lr (t=total)."""
    total = config.total_steps
    if not 1 <= t <= total:
        raise ContractError(f"step {t} outside [1, {total}]")
    if total == 1:
        return config.initial_lr
    frac = (t - 1) / (total - 1)
    return config.initial_lr * math.exp(frac * math.log(config.terminal_lr / config.initial_lr))


class BatchStream:
    """Seeded epoch-wise reshuffling over a fixed tensor; drops the ragged tail."""

    def __init__(self, data: torch.Tensor, batch_size: int, seed: int):
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> torch.Tensor:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.data[torch.from_numpy(idx)]


def build_model(config: RunConfig, input_shape, mode: str) -> S3VDCModel:
    torch.manual_seed(config.seed)
    return S3VDCModel(input_shape, config.latent_dim, config.n_clusters, mode, config.architecture)


def train(config: RunConfig, dataset, hook: Optional[Callable] = None,
          gmm_subsample: Optional[int] = None, stop_after: Optional[int] = None,
          warm_start: Optional[CheckpointBundle] = None) -> CheckpointBundle:
    """Run the full schedule on ``dataset`` and return the final bundle.

    ``hook(t, phase, weight, breakdown)`` is called after every step, and once
    with ``phase.kind == GMM_INIT`` (and ``breakdown`` set to the EM result)
    between the last gamma step and the first annealing step.

    ``stop_after`` ends training early (before the GMM initialization if it
    equals ``t_gamma``). ``warm_start`` takes a bundle stopped at ``t_gamma``,
    copies its encoder/decoder weights and resumes at the GMM initialization;
    the cluster count may differ.
    """
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    sched = config.schedule
    model = build_model(config, dataset.shape, dataset.mode)
    first = 1
    if warm_start is not None:
        if warm_start.step != sched.t_gamma:
            raise ContractError(f"warm start must be taken at step {sched.t_gamma}, got {warm_start.step}")
        state = {k: v for k, v in warm_start.model.state_dict().items() if not k.startswith("prior.")}
        model.load_state_dict(state, strict=False)
        first = sched.t_gamma
    data = dataset.tensor()
    stream = BatchStream(data, config.batch_size, config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.initial_lr)
    run_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    gmm_cfg = config.gmm_config()
    if gmm_subsample is not None:
        gmm_cfg.subsample_size = gmm_subsample
    boundaries = set(phase_boundaries(sched))
    history, checkpoints = [], []
    csv_fh = writer = None
    if run_dir is not None:
        csv_fh = open(run_dir / "loss_history.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(LOSS_COLUMNS)

    bundle = CheckpointBundle(model, 0, config, history=history)
    model.train()
    last = sched.total_steps if stop_after is None else min(stop_after, sched.total_steps)
    try:
        for t in range(first, last + 1):
            if warm_start is not None and t == first:
                res = initialize_prior(model, data, gmm_cfg)
                if hook is not None:
                    hook(t, Phase(PhaseKind.GMM_INIT), None, res)
                continue
            phase = phase_at(t, sched)
            weight = regularizer_weight_at(t, sched)
            lr = learning_rate_at(t, config)
            for group in opt.param_groups:
                group["lr"] = lr
            x = stream.next()
            x_hat = corrupt(x, config.noise_std, gen)
            out = s3vdc_loss(model, x, x_hat, weight, sched.lam, generator=gen, phase=str(phase), step=t)
            opt.zero_grad(set_to_none=True)
            out.total.backward()
            opt.step()
            row = {"step": t, "phase": str(phase), **out.as_floats(), "lr": lr}
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOSS_COLUMNS])
            if hook is not None:
                hook(t, phase, weight, out)

            if t == last and stop_after is not None:
                break
            if t == sched.t_gamma:
                res = initialize_prior(model, data, gmm_cfg)
                _reset_optimizer_state(opt, model.prior.parameters())
                if hook is not None:
                    hook(t, Phase(PhaseKind.GMM_INIT), None, res)
            if t in boundaries:
                bundle.step = t
                bundle.optimizer_state = opt.state_dict()
                if run_dir is not None:
                    checkpoints.append({"step": t, "phase": str(phase),
                                        "path": save_checkpoint(bundle, run_dir)})
                    write_manifest(run_dir, config, checkpoints, history, status="running")
    except NonFiniteLossError as exc:
        log.error("aborting: %s", exc)
        if run_dir is not None:
            (run_dir / "nan_dump.json").write_text(json.dumps(
                {"phase": exc.phase, "step": exc.step, "breakdown": exc.breakdown}, indent=2))
            write_manifest(run_dir, config, checkpoints, history, status="nan_abort")
        raise
    finally:
        if csv_fh is not None:
            csv_fh.close()

    model.eval()
    bundle.step = last
    bundle.optimizer_state = opt.state_dict()
    if run_dir is not None:
        write_manifest(run_dir, config, checkpoints, history,
                       status="complete" if last == sched.total_steps else "stopped")
    return bundle


def _reset_optimizer_state(opt, params) -> None:
    for p in params:
        opt.state.pop(p, None)


# -- persistence ---------------------------------------------------------------

def save_checkpoint(bundle: CheckpointBundle, run_dir) -> str:
    d = Path(run_dir) / f"step-{bundle.step}"
    d.mkdir(parents=True, exist_ok=True)
    torch.save(bundle.model.state_dict(), d / "model.pt")
    if bundle.optimizer_state is not None:
        torch.save(bundle.optimizer_state, d / "optimizer.pt")
    meta = {
        "step": bundle.step,
        "config": bundle.config.to_dict(),
        "input_shape": list(bundle.model.input_shape),
        "mode": bundle.model.mode,
        "metrics": bundle.metrics,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d.name


def load_checkpoint(path) -> CheckpointBundle:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    config = RunConfig.from_dict(meta["config"])
    model = S3VDCModel(meta["input_shape"], config.latent_dim, config.n_clusters, meta["mode"],
                       config.architecture)
    model.load_state_dict(torch.load(d / "model.pt", weights_only=True))
    model.eval()
    opt_path = d / "optimizer.pt"
    opt_state = torch.load(opt_path, weights_only=True) if opt_path.exists() else None
    return CheckpointBundle(model, meta["step"], config, opt_state, meta.get("metrics", {}))


def latest_checkpoint(run_dir) -> Path:
    steps = sorted(Path(run_dir).glob("step-*"), key=lambda p: int(p.name.split("-")[1]))
    if not steps:
        raise FileNotFoundError(f"{run_dir}: no checkpoints")
    return steps[-1]


def write_manifest(run_dir, config: RunConfig, checkpoints, history, status: str, **extra) -> None:
    path = Path(run_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({
        "run_id": config.run_id(),
        "status": status,
        "config": config.to_dict(),
        "checkpoints": checkpoints,
        "metric_history": _phase_summary(history),
        "final_step": history[-1]["step"] if history else 0,
    })
    manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2))


def _phase_summary(history) -> list:
    """Mean losses per contiguous phase block."""
    out, block = [], []
    for row in history + [None]:
        if block and (row is None or row["phase"] != block[0]["phase"]):
            out.append({
                "phase": block[0]["phase"],
                "first_step": block[0]["step"],
                "last_step": block[-1]["step"],
                **{k: float(np.mean([r[k] for r in block])) for k in ("recon", "kl_cat", "kl_gauss", "total")},
            })
            block = []
        if row is not None:
            block.append(row)
    return out
