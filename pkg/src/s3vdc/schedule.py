"""Phase control: gamma-training, one GMM initialization, periodic beta-annealing.

Steps are 1-based. The GMM initialization sits on the boundary between step
``t_gamma`` and ``t_gamma + 1`` and does not consume a step.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

from .errors import ContractError


class PhaseKind(str, enum.Enum):
    GAMMA = "gamma"
    GMM_INIT = "gmm_init"
    ANNEAL = "anneal"
    STATIC = "static"
    DONE = "done"


@dataclass(frozen=True)
class Phase:
    kind: PhaseKind
    period: Optional[int] = None

    def __str__(self) -> str:
        if self.period is None:
            return self.kind.value
        return f"{self.kind.value}[{self.period}]"


@dataclass(frozen=True)
class TrainingSchedule:
    gamma: float
    t_gamma: int
    t_beta: int
    t_static: int
    periods: int
    u: int = 3
    lam: float = 50.0

    def __post_init__(self):
        problems = []
        if not 0 < self.gamma < 0.1:
            problems.append(f"gamma={self.gamma} must satisfy 0 < gamma < 0.1")
        for name in ("t_gamma", "t_beta", "t_static", "periods", "u"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                problems.append(f"{name}={v} must be a positive integer")
        if not self.lam > 0:
            problems.append(f"lambda={self.lam} must be positive")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def period_length(self) -> int:
        return self.t_beta + self.t_static

    @property
    def total_steps(self) -> int:
        return self.t_gamma + self.periods * self.period_length

    def period_start(self, m: int) -> int:
        """Step index T_m after which period ``m`` begins."""
        return self.t_gamma + (m - 1) * self.period_length

    def to_dict(self) -> dict:
        return asdict(self)


def phase_at(t: int, s: TrainingSchedule) -> Phase:
    if t < 1:
        raise ContractError(f"step index must be >= 1, got {t}")
    if t <= s.t_gamma:
        return Phase(PhaseKind.GAMMA)
    if t > s.total_steps:
        return Phase(PhaseKind.DONE)
    m, r = divmod(t - s.t_gamma - 1, s.period_length)
    if r < s.t_beta:
        return Phase(PhaseKind.ANNEAL, m + 1)
    return Phase(PhaseKind.STATIC, m + 1)


def beta_at(t: int, s: TrainingSchedule) -> float:
    phase = phase_at(t, s)
    if phase.kind is not PhaseKind.ANNEAL:
        raise ContractError(f"beta is only defined in annealing phases; step {t} is {phase}")
    offset = t - s.period_start(phase.period)
    return s.gamma + (offset / s.t_beta) ** s.u


def regularizer_weight_at(t: int, s: TrainingSchedule) -> float:
    phase = phase_at(t, s)
    if phase.kind is PhaseKind.GAMMA:
        return s.gamma
    if phase.kind is PhaseKind.ANNEAL:
        return beta_at(t, s)
    if phase.kind is PhaseKind.STATIC:
        return 1.0
    raise ContractError(f"no regularizer weight past the last step ({t} > {s.total_steps})")


def iter_steps(s: TrainingSchedule) -> Iterator[tuple]:
    """Yield ``(t, phase, weight)`` in order, with the GMM-init event inlined.

    The GMM event is yielded as ``(t_gamma, Phase(GMM_INIT), None)`` right after
    the last gamma step.
    """
    for t in range(1, s.total_steps + 1):
        yield t, phase_at(t, s), regularizer_weight_at(t, s)
        if t == s.t_gamma:
            yield t, Phase(PhaseKind.GMM_INIT), None


def phase_boundaries(s: TrainingSchedule) -> list:
    """Steps that close a phase: end of gamma-training and of every anneal/static block."""
    ends = [s.t_gamma]
    for m in range(1, s.periods + 1):
        start = s.period_start(m)
        ends.append(start + s.t_beta)
        ends.append(start + s.period_length)
    return ends


# Hyper-parameters reported for each benchmark dataset.
PRESETS = {
    "inertialhar": dict(
        n_clusters=6, latent_dim=4, batch_size=1024, gmm_k=5, initial_lr=1.5e-3,
        gamma=5e-6, t_gamma=6_000, t_beta=2_500, t_static=500, periods=2,
    ),
    "mnist": dict(
        n_clusters=10, latent_dim=8, batch_size=128, gmm_k=200, initial_lr=2e-3,
        gamma=5e-4, t_gamma=100_000, t_beta=9_000, t_static=1_000, periods=10,
    ),
    "fashion": dict(
        n_clusters=10, latent_dim=6, batch_size=64, gmm_k=400, initial_lr=2e-3,
        gamma=5e-3, t_gamma=100_000, t_beta=9_000, t_static=1_000, periods=10,
    ),
    "king10m": dict(
        n_clusters=6, latent_dim=10, batch_size=1024, gmm_k=750, initial_lr=1.5e-3,
        gamma=5e-4, t_gamma=25_000, t_beta=4_500, t_static=500, periods=6,
    ),
}


def preset_schedule(name: str, u: int = 3, lam: float = 50.0) -> TrainingSchedule:
    p = PRESETS[name.lower()]
    return TrainingSchedule(p["gamma"], p["t_gamma"], p["t_beta"], p["t_static"], p["periods"], u, lam)
