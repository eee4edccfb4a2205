"""The local-update training loop (DiLoCo with AdamW inner steps, MuLoCo with Muon).

Each round every worker takes ``H`` inner steps on its shard of the global
batch, the parameter deltas are (optionally) compressed with error feedback,
reduced by the simulated collective and fed to the Nesterov outer step. With
``partitions > 1`` the parameters are split into contiguous groups that
synchronize at staggered offsets inside the round.

Determinism: batches come from a counter-based stream keyed on
``(seed, global step)`` and are dealt round-robin to workers; every
cross-worker reduction runs on the coordinator in ascending worker order.
Thread count therefore cannot change any result.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from muloco import compress
from muloco.compress import CommStats, CompressorSpec
from muloco.evalsmooth import adaptive_coefficient
from muloco.inner_optim import OptimConfig, apply_step, init_state, step_lr
from muloco.model_zoo import ModelTask, ParamSet
from muloco.outer_optim import OuterConfig, OuterState, mean_in_order, outer_step

DIVERGENCE_THRESHOLD = 1e12
SCHEDULES = ("constant", "cosine_to_tenth")


class DivergenceError(RuntimeError):
    def __init__(self, round_index: int, worker: int, step: int, loss: float):
        super().__init__(f"training diverged at round {round_index}, worker {worker}, step {step} (loss={loss})")
        self.round_index, self.worker, self.step, self.loss = round_index, worker, step, loss


@dataclass(frozen=True)
class RunConfig:
    workers: int = 1
    inner_steps: int = 30
    rounds: int = 10
    inner: OptimConfig = field(default_factory=OptimConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    compressor: CompressorSpec = field(default_factory=CompressorSpec)
    partitions: int = 1
    global_batch: int = 64
    seed: int = 0
    lr_schedule: str = "cosine_to_tenth"
    reset_inner_state: bool = False
    shard_mode: str = "partition"
    ema_alpha: float = 0.2
    record_pseudogradients: bool = False
    record_deltas: bool = False
    record_steps: bool = False
    record_step_norms: bool = False

    def __post_init__(self):
        if min(self.workers, self.inner_steps, self.rounds, self.partitions) < 1:
            raise ValueError("workers, inner_steps, rounds and partitions must be >= 1")
        if self.inner_steps % self.partitions:
            raise ValueError(f"partitions ({self.partitions}) must divide inner_steps ({self.inner_steps})")
        if self.global_batch % self.workers:
            raise ValueError(f"global_batch ({self.global_batch}) must be divisible by workers ({self.workers})")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}")
        if self.shard_mode not in ("partition", "replicate"):
            raise ValueError("shard_mode must be 'partition' or 'replicate'")

    @property
    def total_steps(self) -> int:
        return self.rounds * self.inner_steps

    @property
    def per_worker_batch(self) -> int:
        return self.global_batch // self.workers


@dataclass
class WorkerState:
    worker_id: int
    theta: ParamSet
    opt_states: dict
    ef_residuals: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StepRecord:
    """One inner step on one parameter: ``step = lr * direction``."""

    worker: int
    step: int
    name: str
    lr: float
    step_norm: float
    matrix: np.ndarray | None = None


@dataclass
class SyncEvent:
    step: int
    partition: int
    names: tuple[str, ...]
    stats: CommStats


@dataclass
class RoundLog:
    round_index: int
    step: int
    eval_loss: float
    smoothed_loss: float
    train_loss: float
    syncs: list[SyncEvent] = field(default_factory=list)
    pseudogradients: dict[str, np.ndarray] | None = None
    deltas: list[dict[str, np.ndarray]] | None = None
    steps: list[StepRecord] | None = None

    @property
    def comm_payload_bytes(self) -> int:
        return sum(ev.stats.total_payload for ev in self.syncs)


@dataclass(frozen=True)
class StreamingPlan:
    partitions: tuple[tuple[str, ...], ...]
    offsets: tuple[int, ...]


def lr_at(step: int, total_steps: int, lr_max: float = 1.0, schedule: str = "cosine_to_tenth") -> float:
    """Cosine decay from ``lr_max`` at step 0 to ``0.1 * lr_max`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if schedule == "constant" or total_steps == 1:
        return lr_max
    if schedule != "cosine_to_tenth":
        raise ValueError(f"unknown schedule {schedule!r}")
    frac = step / (total_steps - 1)
    return lr_max * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def balanced_partition(sizes: Sequence[int], parts: int) -> list[int]:
    """Cut points splitting ``sizes`` into ``parts`` contiguous groups with the smallest maximum sum.

    Returns the start index of each group. Ties are broken recursively: the last
    cut is the earliest one that attains the optimum, and the prefix before it is
    split the same way.
    """
    n = len(sizes)
    if parts > n:
        raise ValueError(f"cannot split {n} parameters into {parts} non-empty groups")
    prefix = np.concatenate([[0], np.cumsum(sizes)])
    inf = float("inf")
    best = [[inf] * (parts + 1) for _ in range(n + 1)]
    cut = [[0] * (parts + 1) for _ in range(n + 1)]
    best[0][0] = 0
    for j in range(1, parts + 1):
        for i in range(j, n + 1):
            for k in range(j - 1, i):
                cost = max(best[k][j - 1], prefix[i] - prefix[k])
                if cost < best[i][j]:
                    best[i][j], cut[i][j] = cost, k
    starts = []
    i = n
    for j in range(parts, 0, -1):
        starts.append(cut[i][j])
        i = cut[i][j]
    return starts[::-1]


def streaming_round_plan(inner_steps: int, partitions: int, params: Sequence[tuple[str, int]]) -> StreamingPlan:
    """Split ``(name, numel)`` pairs into ``partitions`` groups synced at offsets ``j * H / J``."""
    if partitions < 1 or inner_steps % partitions:
        raise ValueError(f"partitions ({partitions}) must divide inner_steps ({inner_steps})")
    names = [n for n, _ in params]
    starts = balanced_partition([s for _, s in params], partitions) + [len(names)]
    groups = tuple(tuple(names[a:b]) for a, b in zip(starts, starts[1:]))
    stride = inner_steps // partitions
    return StreamingPlan(groups, tuple(stride * (j + 1) for j in range(partitions)))


def _batch_indices(cfg: RunConfig, worker: int) -> np.ndarray:
    if cfg.shard_mode == "replicate":
        return np.arange(0, cfg.global_batch, cfg.workers)
    return np.arange(worker, cfg.global_batch, cfg.workers)


def global_batch(task: ModelTask, seed: int, step: int, size: int):
    """The global batch at 0-based global ``step``; a pure function of ``(seed, step)``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))
    return task.sample_batch(rng, size)


def _inner_segment(task: ModelTask, cfg: RunConfig, worker: WorkerState, batches, t0: int, round_index: int):
    """Run consecutive inner steps starting at global step ``t0``; mutates ``worker``."""
    records = []
    train_loss = float("nan")
    want_records = cfg.record_steps or cfg.record_step_norms
    for offset, batch in enumerate(batches):
        t = t0 + offset
        loss, grads = task.loss_and_grad(worker.theta, batch)
        if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            raise DivergenceError(round_index, worker.worker_id, t, loss)
        train_loss = loss
        scale = lr_at(t, cfg.total_steps, 1.0, cfg.lr_schedule)
        for decl in task.params:
            name = decl.name
            before = worker.theta[name]
            state = worker.opt_states[name]
            after, worker.opt_states[name] = apply_step(before, grads[name], state, cfg.inner, scale)
            worker.theta[name] = after
            if want_records:
                step = before - after
                records.append(StepRecord(worker.worker_id, t, name, step_lr(before, state, cfg.inner, scale),
                                          float(np.linalg.norm(step)),
                                          step if cfg.record_steps else None))
    return records, train_loss


def _as_2d(x: np.ndarray) -> np.ndarray:
    return x if x.ndim == 2 else x.reshape(1, -1)


class _Trainer:
    def __init__(self, cfg: RunConfig, task: ModelTask, threads: int, theta0=None, states0=None):
        self.cfg, self.task = cfg, task
        self.threads = max(1, threads)
        init = task.init_params() if theta0 is None else theta0
        self.global_theta = {d.name: np.array(init[d.name], dtype=np.float64) for d in task.params}
        self.outer_state = OuterState.zeros_like(self.global_theta)
        self.workers = [self._new_worker(i, states0) for i in range(cfg.workers)]
        self.plan = streaming_round_plan(cfg.inner_steps, cfg.partitions,
                                         [(d.name, d.size) for d in task.params])

    def _new_worker(self, i: int, states0=None) -> WorkerState:
        theta = {k: v.copy() for k, v in self.global_theta.items()}
        if states0 is None:
            states = {d.name: init_state(theta[d.name], self.cfg.inner, d.hidden) for d in self.task.params}
        else:
            states = dict(states0)
        ef = {}
        if self.cfg.compressor.error_feedback:
            ef = {k: np.zeros_like(_as_2d(v)) for k, v in theta.items()}
        return WorkerState(i, theta, states, ef)

    def _segment(self, t0: int, t1: int, round_index: int):
        cfg = self.cfg
        full = [global_batch(self.task, cfg.seed, t, cfg.global_batch) for t in range(t0, t1)]
        shards = [[ModelTask.take(b, _batch_indices(cfg, w.worker_id)) for b in full] for w in self.workers]

        def job(i):
            return _inner_segment(self.task, cfg, self.workers[i], shards[i], t0, round_index)

        if self.threads == 1 or len(self.workers) == 1:
            results = [job(i) for i in range(len(self.workers))]
        else:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(self.workers))) as pool:
                results = list(pool.map(job, range(len(self.workers))))
        records = [r for recs, _ in results for r in recs]
        return records, results[-1][1]

    def _sync(self, names: Sequence[str], step: int, partition: int, snapshot: dict, deltas_out):
        cfg, spec = self.cfg, self.cfg.compressor
        stats = CommStats(compress.collective_name(spec))
        psi, anchors = {}, {}
        for name in names:
            base = self.global_theta[name]
            raw = [_as_2d(base - w.theta[name]) for w in self.workers]
            encoded = []
            for w, d in zip(self.workers, raw):
                if spec.error_feedback:
                    enc, w.ef_residuals[name] = compress.ef_wrap(d, w.ef_residuals[name], spec)
                else:
                    enc = compress.encode(d, spec)
                encoded.append(enc)
            reduced, st = compress.collective_reduce(encoded, spec)
            stats = stats.merge(st)
            psi[name] = reduced.reshape(base.shape)
            if spec.kind != "quant" and all(np.array_equal(e.decode(), d) for e, d in zip(encoded, raw)):
                anchors[name] = mean_in_order([w.theta[name] for w in self.workers])
            if deltas_out is not None:
                for i, d in enumerate(raw):
                    deltas_out[i][name] = d.reshape(base.shape)
        sub_theta = {n: self.global_theta[n] for n in names}
        sub_state = OuterState({n: self.outer_state.u[n] for n in names})
        new_theta, new_state = outer_step(sub_theta, psi, sub_state, cfg.outer, anchor=anchors)
        for n in names:
            self.global_theta[n] = new_theta[n]
            self.outer_state.u[n] = new_state.u[n]
            for w in self.workers:
                w.theta[n] = new_theta[n].copy()
                if cfg.reset_inner_state:
                    decl = next(d for d in self.task.params if d.name == n)
                    w.opt_states[n] = init_state(w.theta[n], cfg.inner, decl.hidden)
        snapshot.update(psi)
        return SyncEvent(step, partition, tuple(names), stats)

    def run(self) -> tuple[ParamSet, list[RoundLog]]:
        cfg = self.cfg
        H = cfg.inner_steps
        logs: list[RoundLog] = []
        smoothed = None
        coeff = adaptive_coefficient(cfg.ema_alpha, H, H)
        for n in range(cfg.rounds):
            start = n * H
            psi_snapshot: dict = {}
            deltas = [dict() for _ in self.workers] if cfg.record_deltas else None
            syncs, records = [], []
            cursor = 0
            train_loss = float("nan")
            for j, offset in enumerate(self.plan.offsets):
                recs, train_loss = self._segment(start + cursor, start + offset, n)
                records.extend(recs)
                cursor = offset
                syncs.append(self._sync(self.plan.partitions[j], start + offset, j, psi_snapshot, deltas))
            if n == cfg.rounds - 1:
                # Partitions synced mid-round still hold unsynced drift at the end of training.
                for j, offset in enumerate(self.plan.offsets[:-1]):
                    syncs.append(self._sync(self.plan.partitions[j], start + H, j, psi_snapshot, deltas))
            loss = self.task.eval_loss(self.global_theta)
            if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(n, -1, start + H, loss)
            smoothed = loss if smoothed is None else coeff * loss + (1.0 - coeff) * smoothed
            logs.append(RoundLog(
                round_index=n, step=start + H, eval_loss=loss, smoothed_loss=smoothed, train_loss=train_loss,
                syncs=syncs,
                pseudogradients=psi_snapshot if cfg.record_pseudogradients else None,
                deltas=deltas,
                steps=records if (cfg.record_steps or cfg.record_step_norms) else None,
            ))
        return {k: v.copy() for k, v in self.global_theta.items()}, logs


def run(cfg: RunConfig, task: ModelTask, threads: int = 1) -> tuple[ParamSet, list[RoundLog]]:
    """Execute ``cfg.rounds`` synchronization rounds; returns final global parameters and per-round logs."""
    return _Trainer(cfg, task, threads).run()


def probe_round(cfg: RunConfig, task: ModelTask, theta: ParamSet, opt_states: dict, start_step: int,
                threads: int = 1) -> tuple[ParamSet, list[ParamSet], list[StepRecord]]:
    """Run one round of ``cfg.inner_steps`` inner steps from a checkpoint without an outer step.

    Every worker starts from ``theta`` and a copy of ``opt_states`` (states are
    immutable values, so sharing them is safe). Returns the uncompressed
    pseudogradient, the per-worker deltas and any recorded steps. With
    ``workers=1`` and the same global batch this is the data-parallel reference.
    """
    if not 0 <= start_step <= cfg.total_steps - cfg.inner_steps:
        raise ValueError("probe round must fit inside the learning-rate schedule")
    trainer = _Trainer(cfg, task, threads, theta0=theta, states0=opt_states)
    records, _ = trainer._segment(start_step, start_step + cfg.inner_steps, 0)
    names = [d.name for d in task.params]
    deltas = [{n: trainer.global_theta[n] - w.theta[n] for n in names} for w in trainer.workers]
    psi = {n: mean_in_order([d[n] for d in deltas]) for n in names}
    return psi, deltas, records


def train_plain(task: ModelTask, inner: OptimConfig, steps: int, global_batch_size: int, seed: int = 0,
                lr_schedule: str = "cosine_to_tenth", schedule_steps: int | None = None,
                return_states: bool = False):
    """Single-replica training over the same batch stream.

    Returns parameters and per-step train losses, plus the optimizer states
    when ``return_states``. ``schedule_steps`` (default ``steps``) sets the
    horizon of the learning-rate schedule so that a run can stop early.
    """
    horizon = steps if schedule_steps is None else schedule_steps
    params = {d.name: np.array(task.init_params()[d.name], dtype=np.float64) for d in task.params}
    states = {d.name: init_state(params[d.name], inner, d.hidden) for d in task.params}
    losses = []
    for t in range(steps):
        loss, grads = task.loss_and_grad(params, global_batch(task, seed, t, global_batch_size))
        if not math.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
            raise DivergenceError(0, 0, t, loss)
        losses.append(loss)
        scale = lr_at(t, horizon, 1.0, lr_schedule)
        for d in task.params:
            params[d.name], states[d.name] = apply_step(params[d.name], grads[d.name], states[d.name], inner, scale)
    if return_states:
        return params, losses, states
    return params, losses
