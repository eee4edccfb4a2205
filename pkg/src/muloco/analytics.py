"""Pseudogradient diagnostics: alignment, spectra, interference and the nuclear-norm audit."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from muloco.linalg import as_matrix, frobenius_inner, frobenius_norm, singular_values, svd

CSV_COLUMNS = ("parameter", "worker", "round", "metric", "value")
DEGENERATE = "degenerate"


def top_s(fraction: float, r: int) -> int:
    """Number of leading singular values for a fractional budget, e.g. 0.05 -> top 5%."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    return max(1, round(fraction * r))


def _stack(deltas: Sequence) -> list[np.ndarray]:
    mats = [as_matrix(d, "delta") for d in deltas]
    if not mats:
        raise ValueError("need at least one matrix")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("all matrices must share one shape")
    return mats


def interference_gap(deltas: Sequence, s: int) -> float:
    """Mean top-``s`` singular mass of the inputs minus the top-``s`` mass of their mean."""
    mats = _stack(deltas)
    r = min(mats[0].shape)
    if not 1 <= s <= r:
        raise ValueError(f"S={s} outside [1, {r}]")
    mean = sum(mats[1:], mats[0].copy()) / len(mats)
    individual = sum(float(np.sum(singular_values(m)[:s])) for m in mats) / len(mats)
    return individual - float(np.sum(singular_values(mean)[:s]))


@dataclass(frozen=True)
class StepTerm:
    """One weighted constituent ``alpha * psi`` of a pseudogradient."""

    worker: int
    step: int
    alpha: float
    psi: np.ndarray


@dataclass(frozen=True)
class AuditRecord:
    lhs: float
    rhs: float
    rel_discrepancy: float
    rhs_orthonormal: float
    rel_discrepancy_orthonormal: float
    rank: int
    degenerate: bool
    alignments: tuple[float, ...]


def _rel(a: float, b: float) -> float:
    if a == 0.0:
        return 0.0 if b == 0.0 else math.inf
    return abs(a - b) / abs(a)


def nuclear_decomposition_audit(steps: Sequence[StepTerm], psi, workers: int, tol: float = 1e-9) -> AuditRecord:
    """Check ``||Psi||_* = (sqrt(r)/K) sum alpha * rho * ||psi||_F`` with ``Psi* = U V^T``.

    ``rho`` is the cosine between each step and ``Psi*``. The orthonormal-step
    simplification replaces ``||psi||_F`` by ``sqrt(r)``. Steps of zero norm
    contribute zero. A zero pseudogradient is reported as degenerate with both
    sides zero.
    """
    big = as_matrix(psi, "psi")
    if workers < 1 or not steps:
        raise ValueError("need K >= 1 and at least one step")
    if any(t.alpha < 0 for t in steps):
        raise ValueError("step weights must be non-negative")
    recon = np.zeros_like(big)
    scale = 0.0
    for t in steps:
        p = as_matrix(t.psi, "step")
        if p.shape != big.shape:
            raise ValueError("step shape differs from the pseudogradient")
        recon = recon + t.alpha * p
        scale += t.alpha * frobenius_norm(p)
    recon = recon / workers
    if frobenius_norm(recon - big) > tol * max(1.0, scale / workers):
        raise ValueError("pseudogradient is inconsistent with its constituent steps")

    r = min(big.shape)
    lhs = float(np.sum(svd(big).sigma))
    if lhs == 0.0:
        return AuditRecord(0.0, 0.0, 0.0, 0.0, 0.0, r, True, tuple(0.0 for _ in steps))
    star = svd(big).orthonormal_factor()
    star_norm = math.sqrt(r)
    rho = []
    rhs = rhs_orth = 0.0
    for t in steps:
        norm = frobenius_norm(t.psi)
        c = 0.0 if norm == 0.0 else frobenius_inner(t.psi, star) / (norm * star_norm)
        rho.append(c)
        rhs += t.alpha * c * norm
        rhs_orth += t.alpha * c
    rhs *= star_norm / workers
    rhs_orth *= r / workers
    return AuditRecord(lhs, rhs, _rel(lhs, rhs), rhs_orth, _rel(lhs, rhs_orth), r, False, tuple(rho))


@dataclass(frozen=True)
class MetricRow:
    parameter: str
    worker: int
    round: int
    metric: str
    value: float | None

    @property
    def degenerate(self) -> bool:
        return self.value is None

    def as_csv(self) -> tuple:
        return (self.parameter, self.worker, self.round, self.metric,
                DEGENERATE if self.value is None else repr(float(self.value)))


def safe_cosine(a, b) -> float | None:
    """Cosine similarity, or ``None`` when either side has zero norm."""
    na, nb = frobenius_norm(a), frobenius_norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(frobenius_inner(a, b) / (na * nb), -1.0, 1.0))


def _quartiles(values: Iterable[float | None]) -> tuple[float, float, float] | None:
    v = [x for x in values if x is not None]
    if not v:
        return None
    q = np.quantile(np.asarray(v), [0.25, 0.5, 0.75])
    return float(q[0]), float(q[1]), float(q[2])


@dataclass
class AlignmentReport:
    rows: list[MetricRow] = field(default_factory=list)

    def values(self, metric: str, parameter: str | None = None) -> list[float | None]:
        return [r.value for r in self.rows if r.metric == metric and (parameter is None or r.parameter == parameter)]

    def summary(self) -> dict[tuple[str, str], tuple[float, float, float] | None]:
        keys = sorted({(r.parameter, r.metric) for r in self.rows})
        return {k: _quartiles(self.values(k[1], k[0])) for k in keys}


def _round_artifacts(logs) -> list:
    picked = [log for log in logs if log.deltas is not None and log.pseudogradients is not None]
    if not picked:
        raise ValueError("no round carries delta and pseudogradient snapshots; enable recording")
    return picked


def alignment_report(logs, reference: Mapping[int, Mapping[str, np.ndarray]] | None = None,
                     parameters: Sequence[str] | None = None) -> AlignmentReport:
    """Cosine alignments per parameter, worker and round.

    Metrics:
      ``worker_vs_reference``: each worker delta against ``reference[round]``
      (the round's pseudogradient when no reference is given);
      ``pseudogradient_vs_reference``: only with an explicit reference;
      ``step_vs_pseudogradient``: mean over the worker's recorded inner steps;
      ``trajectory_vs_pseudogradient``: the worker's delta against the pseudogradient.
    """
    report = AlignmentReport()
    for log in _round_artifacts(logs):
        psi = log.pseudogradients
        names = sorted(parameters if parameters is not None else psi)
        ref = None if reference is None else reference[log.round_index]
        for name in names:
            target = psi[name] if ref is None else ref[name]
            if ref is not None:
                report.rows.append(MetricRow(name, -1, log.round_index, "pseudogradient_vs_reference",
                                             safe_cosine(psi[name], target)))
            for k, delta in enumerate(log.deltas):
                report.rows.append(MetricRow(name, k, log.round_index, "worker_vs_reference",
                                             safe_cosine(delta[name], target)))
                report.rows.append(MetricRow(name, k, log.round_index, "trajectory_vs_pseudogradient",
                                             safe_cosine(delta[name], psi[name])))
                if log.steps:
                    cos = [safe_cosine(s.matrix, psi[name]) for s in log.steps
                           if s.name == name and s.worker == k and s.matrix is not None]
                    cos = [c for c in cos if c is not None]
                    if cos:
                        report.rows.append(MetricRow(name, k, log.round_index, "step_vs_pseudogradient",
                                                     float(np.mean(cos))))
    return report


@dataclass
class SpectralReport:
    worker_sigmas: dict[str, list[np.ndarray]]
    psi_sigmas: dict[str, np.ndarray]
    gaps: dict[str, dict[int, float]]


def spectra(deltas: Sequence[Mapping[str, np.ndarray]], fractions: Sequence[float] = (0.05,),
            parameters: Sequence[str] | None = None) -> SpectralReport:
    """Singular values of worker deltas and of their mean, plus interference gaps.

    Gaps are keyed by the resolved ``S`` for each requested fraction of ``r``.
    Only 2-D parameters are analysed.
    """
    if not deltas:
        raise ValueError("need at least one worker delta")
    names = sorted(parameters if parameters is not None else
                   [n for n, v in deltas[0].items() if np.ndim(v) == 2])
    ws, ps, gaps = {}, {}, {}
    for name in names:
        mats = [d[name] for d in deltas]
        ws[name] = [singular_values(m) for m in mats]
        ps[name] = singular_values(sum(mats[1:], mats[0].copy()) / len(mats))
        r = min(mats[0].shape)
        gaps[name] = {top_s(f, r): interference_gap(mats, top_s(f, r)) for f in fractions}
    return SpectralReport(ws, ps, gaps)


@dataclass(frozen=True)
class StepNormRow:
    parameter: str
    worker: int
    round: int
    step: int
    lr: float
    step_norm: float

    @property
    def direction_norm(self) -> float:
        """``||psi||_F`` with ``step = lr * psi``."""
        return self.step_norm / self.lr if self.lr else 0.0


def step_norm_trace(logs, parameters: Sequence[str] | None = None) -> list[StepNormRow]:
    rows = []
    for log in logs:
        if log.steps is None:
            raise ValueError(f"round {log.round_index} has no step records; enable step-norm recording")
        for s in log.steps:
            if parameters is None or s.name in parameters:
                rows.append(StepNormRow(s.name, s.worker, log.round_index, s.step, s.lr, s.step_norm))
    rows.sort(key=lambda r: (r.parameter, r.worker, r.step))
    return rows


def coefficient_of_variation(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty sample")
    mean = float(v.mean())
    if mean == 0.0:
        raise ValueError("coefficient of variation undefined for zero mean")
    return float(v.std()) / abs(mean)


def trace_rows(trace: Sequence[StepNormRow]) -> list[MetricRow]:
    out = []
    for r in trace:
        out.append(MetricRow(r.parameter, r.worker, r.round, f"step_norm@{r.step}", r.step_norm))
        out.append(MetricRow(r.parameter, r.worker, r.round, f"direction_norm@{r.step}", r.direction_norm))
    return out


def spectral_rows(report: SpectralReport, round_index: int = 0) -> list[MetricRow]:
    out = []
    for name in sorted(report.psi_sigmas):
        for k, sig in enumerate(report.worker_sigmas[name]):
            out.extend(MetricRow(name, k, round_index, f"sigma_{j}", float(x)) for j, x in enumerate(sig))
        out.extend(MetricRow(name, -1, round_index, f"sigma_{j}", float(x))
                   for j, x in enumerate(report.psi_sigmas[name]))
        for s, g in sorted(report.gaps[name].items()):
            out.append(MetricRow(name, -1, round_index, f"interference_gap_top{s}", g))
    return out


def write_csv(path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
