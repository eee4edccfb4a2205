"""Time-weighted EMA of an evaluation-loss trajectory."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


class NoBoundaryPointsError(ValueError):
    pass


@dataclass(frozen=True)
class LossTrajectory:
    steps: tuple[int, ...]
    losses: tuple[float, ...]

    def __post_init__(self):
        if len(self.steps) != len(self.losses):
            raise ValueError("steps and losses differ in length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly increasing")
        if not all(math.isfinite(x) for x in self.losses):
            raise ValueError("losses must be finite")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, float]]) -> "LossTrajectory":
        return cls(tuple(int(t) for t, _ in pairs), tuple(float(x) for _, x in pairs))


def adaptive_coefficient(alpha: float, dt: float, sync_interval: int) -> float:
    """``1 - exp(-alpha * dt / H)``."""
    return -math.expm1(-alpha * dt / sync_interval)


def smoothed_sequence(traj: LossTrajectory, alpha: float = 0.2, sync_interval: int = 30) -> list[tuple[int, float]]:
    """All ``(step, s_j)`` after keeping only steps divisible by ``sync_interval``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if sync_interval < 1:
        raise ValueError("sync_interval must be >= 1")
    kept = [(t, x) for t, x in zip(traj.steps, traj.losses) if t % sync_interval == 0]
    if not kept:
        raise NoBoundaryPointsError(f"no measurement falls on a multiple of {sync_interval}")
    out = [kept[0]]
    s = kept[0][1]
    for (t_prev, _), (t, x) in zip(kept, kept[1:]):
        a = adaptive_coefficient(alpha, t - t_prev, sync_interval)
        s = a * x + (1.0 - a) * s
        out.append((t, s))
    return out


def smoothed_final_loss(traj: LossTrajectory, alpha: float = 0.2, sync_interval: int = 30) -> float:
    return smoothed_sequence(traj, alpha, sync_interval)[-1][1]
