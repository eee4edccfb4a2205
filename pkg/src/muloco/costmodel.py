"""Idealized wall-clock and compute-utilization estimates.

Time is ``steps * (compute + optimizer)`` plus, for every synchronization
event, the per-worker bytes put on the wire divided by the bandwidth.
Communication never overlaps computation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from muloco.compress import CompressorSpec, collective_name, comm_bytes
from muloco.engine import balanced_partition

COLLECTIVES = ("ring_allreduce", "a2a_rs_then_ag", "allgather")


def volume_factor(collective: str, workers: int) -> Fraction:
    """Bytes each worker sends per payload byte under ``collective``."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if collective in ("ring_allreduce", "a2a_rs_then_ag"):
        return Fraction(2 * (workers - 1), workers)
    if collective == "allgather":
        return Fraction(workers - 1)
    raise ValueError(f"unknown collective {collective!r}; expected one of {COLLECTIVES}")


@dataclass(frozen=True)
class CostConfig:
    bandwidth_bps: float
    shapes: tuple[tuple[int, int], ...]
    step_compute_s: float
    optimizer_step_s: float
    workers: int
    inner_steps: int
    steps_total: int
    spec: CompressorSpec = field(default_factory=CompressorSpec)
    collective: str | None = None
    partitions: int = 1

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if self.step_compute_s < 0 or self.optimizer_step_s < 0:
            raise ValueError("times must be non-negative")
        if self.step_compute_s + self.optimizer_step_s <= 0:
            raise ValueError("a step must take positive time")
        if min(self.workers, self.inner_steps, self.steps_total, self.partitions) < 1:
            raise ValueError("workers, inner_steps, steps_total and partitions must be >= 1")
        if not self.shapes:
            raise ValueError("need at least one parameter shape")
        if self.collective is not None and self.collective not in COLLECTIVES:
            raise ValueError(f"collective must be one of {COLLECTIVES}")

    @property
    def resolved_collective(self) -> str:
        return self.collective or collective_name(self.spec)

    def with_bandwidth(self, bps: float) -> "CostConfig":
        return CostConfig(bps, self.shapes, self.step_compute_s, self.optimizer_step_s, self.workers,
                          self.inner_steps, self.steps_total, self.spec, self.collective, self.partitions)


@dataclass(frozen=True)
class WallClock:
    total_s: float
    compute_s: float
    comm_s: float
    events: int
    event_bytes: tuple[Fraction, ...]
    comm_bytes: Fraction = Fraction(0)

    @property
    def peak_event_bytes(self) -> Fraction:
        return max(self.event_bytes)

    @property
    def comm_fraction(self) -> float:
        return self.comm_s / self.total_s

    @property
    def utilization(self) -> float:
        return self.compute_s / (self.compute_s + self.comm_s)


def payload_bytes(spec: CompressorSpec, shape: tuple[int, int], workers: int) -> int:
    return int(comm_bytes(spec, tuple(shape), workers)["payload"])


def event_bytes(cfg: CostConfig) -> tuple[Fraction, ...]:
    """Per-worker bytes sent at each of the ``J`` synchronization events of a round."""
    factor = volume_factor(cfg.resolved_collective, cfg.workers)
    sizes = [payload_bytes(cfg.spec, s, cfg.workers) for s in cfg.shapes]
    numel = [s[0] * s[1] for s in cfg.shapes]
    starts = balanced_partition(numel, cfg.partitions) + [len(sizes)]
    return tuple(factor * sum(sizes[a:b]) for a, b in zip(starts, starts[1:]))


def estimate_wallclock(cfg: CostConfig) -> WallClock:
    rounds = math.ceil(cfg.steps_total / cfg.inner_steps)
    per_event = event_bytes(cfg)
    total_bytes = sum(per_event) * rounds
    # Exact rational time, rounded once, so event-count scaling carries over to seconds.
    comm = 0.0 if math.isinf(cfg.bandwidth_bps) else float(total_bytes * 8 / Fraction(cfg.bandwidth_bps))
    compute = cfg.steps_total * (cfg.step_compute_s + cfg.optimizer_step_s)
    return WallClock(compute + comm, compute, comm, rounds * cfg.partitions, per_event, total_bytes)


def compute_utilization(cfg: CostConfig, bandwidths: Sequence[float]) -> list[tuple[float, float]]:
    """``(bandwidth, utilization)`` pairs; any time not spent communicating counts as compute."""
    return [(float(b), estimate_wallclock(cfg.with_bandwidth(b)).utilization) for b in bandwidths]


def write_curve(path, rows: Sequence[tuple[float, float]], header=("bandwidth_bps", "utilization")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b, u in rows:
            w.writerow((repr(float(b)), repr(float(u))))


@dataclass(frozen=True)
class StepTimes:
    end_to_end_s: dict[str, float]

    def optimizer_overhead_s(self, optimizer: str, baseline: str = "adamw") -> float:
        return self.end_to_end_s[optimizer] - self.end_to_end_s[baseline]


def read_step_times(path) -> StepTimes:
    """Read the ``metric,adamw,muon`` table and keep the end-to-end step time row."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    for r in rows:
        if r["metric"] == "end_to_end_s":
            return StepTimes({k: float(v) for k, v in r.items() if k != "metric"})
    raise ValueError(f"{path}: no end_to_end_s row")
