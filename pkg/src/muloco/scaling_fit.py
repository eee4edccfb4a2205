"""Power-law scaling fits, critical batch sizes and training-time efficiency.

Loss model per method ``m``: ``L(C) = a_m * C**alpha_m + c`` where the offset
``c`` is zero (``plain``), fitted per method (``per_method_offset``) or shared
across methods (``joint_irr``). Fits minimise a Huber loss on
``log L_pred - log L_obs`` with L-BFGS-B from many random starts.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

HUBER_DELTA = 1e-3
MAX_ITER = 15000
FORMS = ("plain", "per_method_offset", "joint_irr")
_OPTIONS = {"maxiter": MAX_ITER, "ftol": 1e-15, "gtol": 1e-12}
# Offsets live on (0, min L); keep them strictly inside so log(L - c) stays finite.
_OFFSET_MARGIN = 1e-9


class RankDeficiencyError(ValueError):
    pass


class InversionError(ValueError):
    pass


@dataclass(frozen=True)
class FitDatum:
    method: str
    x: float
    loss: float
    workers: int = 1

    def __post_init__(self):
        if not (self.x > 0 and math.isfinite(self.x)):
            raise ValueError(f"x must be positive and finite, got {self.x}")
        if not (self.loss > 0 and math.isfinite(self.loss)):
            raise ValueError(f"loss must be positive and finite, got {self.loss}")


@dataclass(frozen=True)
class PowerLawFit:
    form: str
    params: dict[str, tuple[float, float]]
    offsets: dict[str, float]
    residual: float
    objective: float
    restarts: int = 0
    irr_candidates: tuple[float, ...] = field(default=(), repr=False)

    def predict(self, method: str, x) -> np.ndarray:
        a, alpha = self.params[method]
        return a * np.asarray(x, dtype=np.float64) ** alpha + self.offsets[method]

    @property
    def shared_offset(self) -> float | None:
        vals = set(self.offsets.values())
        return vals.pop() if self.form == "joint_irr" and len(vals) == 1 else None


def huber(r, delta: float = HUBER_DELTA) -> np.ndarray:
    r = np.abs(np.asarray(r, dtype=np.float64))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _group(data: Sequence[FitDatum]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    groups: dict[str, list[FitDatum]] = defaultdict(list)
    for d in data:
        groups[d.method].append(d)
    out = {}
    for m in sorted(groups):
        pts = groups[m]
        if len(pts) < 2:
            raise ValueError(f"method {m!r} needs at least 2 points, got {len(pts)}")
        x = np.log([p.x for p in pts])
        if np.ptp(x) == 0.0:
            raise RankDeficiencyError(f"all x values of method {m!r} are equal")
        out[m] = (x, np.log([p.loss for p in pts]))
    if not out:
        raise ValueError("no data")
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_model(u, c):
    """``log(exp(u) + c)`` and its derivative in ``u``, overflow-free."""
    if c == 0.0:
        return u, np.ones_like(u)
    log_c = math.log(c)
    return np.logaddexp(u, log_c), expit(u - log_c)


def _logit(p):
    return math.log(p / (1.0 - p))


class _Problem:
    """Objective over packed parameters ``[b_m, alpha_m]*M (+ offset logits)``.

    ``b_m`` is the log-amplitude at the centred abscissa; offsets are
    ``cap * sigmoid(z)``. ``offset_mode`` is ``none``, ``fixed``, ``each`` or ``shared``.
    """

    def __init__(self, groups, offset_mode: str, fixed_offset: float = 0.0):
        self.methods = list(groups)
        self.x = [groups[m][0] for m in self.methods]
        self.y = [groups[m][1] for m in self.methods]
        self.centre = [float(x.mean()) for x in self.x]
        self.xc = [x - c for x, c in zip(self.x, self.centre)]
        self.mode = offset_mode
        self.fixed = fixed_offset
        min_loss = [float(np.exp(y.min())) for y in self.y]
        self.caps = min_loss if offset_mode == "each" else [min(min_loss)] * len(min_loss)
        n_off = {"none": 0, "fixed": 0, "each": len(self.methods), "shared": 1}[offset_mode]
        self.size = 2 * len(self.methods) + n_off

    def offset_of(self, p, i):
        if self.mode == "none":
            return 0.0, 0.0
        if self.mode == "fixed":
            return self.fixed, 0.0
        z = p[2 * len(self.methods) + (i if self.mode == "each" else 0)]
        s = _sigmoid(z)
        cap = self.caps[i] * (1.0 - _OFFSET_MARGIN)
        return cap * s, cap * s * (1.0 - s)

    def __call__(self, p):
        total = 0.0
        grad = np.zeros_like(p)
        for i in range(len(self.methods)):
            b, alpha = p[2 * i], p[2 * i + 1]
            c, dc = self.offset_of(p, i)
            log_pred, frac = _log_model(b + alpha * self.xc[i], c)
            r = log_pred - self.y[i]
            total += float(huber(r).sum())
            w = np.clip(r, -HUBER_DELTA, HUBER_DELTA)
            we = w * frac
            grad[2 * i] += we.sum()
            grad[2 * i + 1] += (we * self.xc[i]).sum()
            if self.mode in ("each", "shared") and dc > 0.0:
                # d log_pred / dz = dc / (e^u + c), formed in log space to avoid overflow.
                grad[2 * len(self.methods) + (i if self.mode == "each" else 0)] += (
                    w * np.exp(math.log(dc) - log_pred)).sum()
        return total, grad

    def initial(self, rng: np.random.Generator) -> np.ndarray:
        p = np.empty(self.size)
        for i in range(len(self.methods)):
            alpha = rng.uniform(-1.0, 0.0)
            log_a = rng.uniform(-5.0, 15.0)
            p[2 * i], p[2 * i + 1] = log_a + alpha * self.centre[i], alpha
        for j in range(2 * len(self.methods), self.size):
            p[j] = _logit(rng.uniform(0.01, 0.99))
        return p

    def unpack(self, p, form: str, restarts: int, objective: float) -> PowerLawFit:
        params, offsets = {}, {}
        residual = []
        for i, m in enumerate(self.methods):
            b, alpha = float(p[2 * i]), float(p[2 * i + 1])
            c = float(self.offset_of(p, i)[0])
            params[m] = (math.exp(b - alpha * self.centre[i]), alpha)
            offsets[m] = c
            residual.append(np.abs(_log_model(b + alpha * self.xc[i], c)[0] - self.y[i]))
        return PowerLawFit(form, params, offsets, float(np.mean(np.concatenate(residual))),
                           float(objective), restarts)


def _multistart(problem: _Problem, restarts: int, seed: int):
    """Best of ``restarts`` independent L-BFGS-B runs; ties go to the earliest start."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        res = minimize(problem, problem.initial(rng), jac=True, method="L-BFGS-B", options=_OPTIONS)
        if np.all(np.isfinite(res.x)) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("every restart produced non-finite parameters")
    return best


def batched_bfgs(fun, x0: np.ndarray, maxiter: int = MAX_ITER, gtol: float = 1e-10, ftol: float = 1e-14):
    """Minimise many independent problems at once with BFGS and Armijo backtracking.

    ``fun(X)`` maps an ``(n, d)`` array of points to values ``(n,)`` and
    gradients ``(n, d)``; each row is optimised on its own and stops once its
    gradient or relative decrease is below tolerance.
    """
    x = np.array(x0, dtype=np.float64)
    n, d = x.shape
    f, g = fun(x)
    h = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    active = np.ones(n, dtype=bool)
    eye = np.eye(d)
    for _ in range(maxiter):
        active &= np.abs(g).max(axis=1) > gtol
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa, fa, ga, ha = x[idx], f[idx], g[idx], h[idx]
        p = -np.einsum("nij,nj->ni", ha, ga)
        slope = np.einsum("ni,ni->n", ga, p)
        uphill = slope >= 0
        if uphill.any():
            ha[uphill] = eye
            p[uphill] = -ga[uphill]
            slope[uphill] = -np.einsum("ni,ni->n", ga[uphill], ga[uphill])
        t = np.ones(len(idx))
        xn, (fn, gn) = xa + p, fun(xa + p)
        for _ in range(60):
            bad = ~(np.isfinite(fn) & (fn <= fa + 1e-4 * t * slope))
            if not bad.any():
                break
            t[bad] *= 0.5
            xb = xa[bad] + t[bad, None] * p[bad]
            fb, gb = fun(xb)
            xn[bad], fn[bad], gn[bad] = xb, fb, gb
        stuck = ~(np.isfinite(fn) & (fn <= fa + 1e-4 * t * slope))
        xn[stuck], fn[stuck], gn[stuck] = xa[stuck], fa[stuck], ga[stuck]
        sv, yv = xn - xa, gn - ga
        sy = np.einsum("ni,ni->n", sv, yv)
        ok = sy > 1e-300
        if ok.any():
            rho = 1.0 / sy[ok]
            left = eye - rho[:, None, None] * np.einsum("ni,nj->nij", sv[ok], yv[ok])
            ha[ok] = (np.einsum("nij,njk,nlk->nil", left, ha[ok], left)
                      + rho[:, None, None] * np.einsum("ni,nj->nij", sv[ok], sv[ok]))
        x[idx], g[idx], h[idx] = xn, gn, ha
        small = np.abs(fa - fn) <= ftol * np.maximum(np.maximum(np.abs(fa), np.abs(fn)), 1.0)
        f[idx] = fn
        active[idx[small | stuck]] = False
    return x, f


def _fixed_offset_score(groups, offset: float, restarts: int, seed: int, maxiter: int) -> float:
    """Best objective over ``restarts`` starts with the offset held at ``offset``.

    Methods and starts are independent once the offset is fixed, so all of
    them run through one vectorised BFGS; used to rank offset candidates.
    """
    problem = _Problem(groups, "fixed", offset)
    rng = np.random.default_rng(seed)
    starts = np.stack([problem.initial(rng) for _ in range(restarts)])
    best = 0.0
    for i in range(len(problem.methods)):
        xs, ys = problem.xc[i], problem.y[i]

        def fun(p):
            log_pred, frac = _log_model(p[:, 0, None] + p[:, 1, None] * xs, offset)
            r = log_pred - ys
            we = np.clip(r, -HUBER_DELTA, HUBER_DELTA) * frac
            return huber(r).sum(axis=1), np.stack([we.sum(axis=1), (we * xs).sum(axis=1)], axis=1)

        _, values = batched_bfgs(fun, starts[:, 2 * i:2 * i + 2], maxiter=maxiter)
        best += float(np.nanmin(values))
    return best


def fit_power_law(data: Sequence[FitDatum], form: str = "per_method_offset", restarts: int = 512,
                  seed: int = 0) -> PowerLawFit:
    """Multi-start Huber fit of ``a * x**alpha (+ offset)`` per method."""
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}")
    groups = _group(data)
    needed = 2 if form == "plain" else 3
    for m, (x, _) in groups.items():
        if len(x) < needed:
            raise ValueError(f"method {m!r} needs at least {needed} points for form {form!r}")
    mode = {"plain": "none", "per_method_offset": "each", "joint_irr": "shared"}[form]
    problem = _Problem(groups, mode)
    best = _multistart(problem, restarts, seed)
    return problem.unpack(best.x, form, restarts, best.fun)


def fit_at_offset(data: Sequence[FitDatum], offset: float, restarts: int = 512, seed: int = 0) -> PowerLawFit:
    """Per-method fit with the offset held at ``offset`` for every method."""
    groups = _group(data)
    problem = _Problem(groups, "fixed", offset)
    best = _multistart(problem, restarts, seed)
    return problem.unpack(best.x, "joint_irr", restarts, best.fun)


def fit_joint_irr(data: Sequence[FitDatum], restarts: int = 512, seed: int = 0, candidates: int = 200,
                  coarse_restarts: int = 64, zoom: int = 10, lower_fraction: float = 1e-3,
                  coarse_maxiter: int = 200) -> PowerLawFit:
    """Shared irreducible loss found by a three-phase search.

    1. ``candidates`` log-spaced offsets in ``(lower_fraction * min L, min L)``,
       each scored with ``coarse_restarts`` starts capped at ``coarse_maxiter``
       iterations (ranking only needs the best start, which settles early).
    2. The neighbourhood of the best candidate (one grid cell each side) is
       re-scanned at ``zoom`` times the resolution.
    3. The winning offset is refitted with ``restarts`` starts.

    A single method falls back to a free per-method offset.
    """
    groups = _group(data)
    if len(groups) == 1:
        return fit_power_law(data, "per_method_offset", restarts, seed)
    for m, (x, _) in groups.items():
        if len(x) < 3:
            raise ValueError(f"method {m!r} needs at least 3 points")
    top = min(float(np.exp(y.min())) for _, y in groups.values()) * (1.0 - _OFFSET_MARGIN)
    grid = np.geomspace(lower_fraction * top, top, candidates + 1)[:-1]
    scores = [_fixed_offset_score(groups, c, coarse_restarts, seed, coarse_maxiter) for c in grid]
    k = int(np.argmin(scores))
    lo = grid[max(k - 1, 0)]
    hi = grid[k + 1] if k + 1 < len(grid) else top
    fine = np.geomspace(lo, hi, 2 * zoom + 1)
    fine = fine[fine < top]
    fine_scores = [_fixed_offset_score(groups, c, coarse_restarts, seed, coarse_maxiter) for c in fine]
    chosen = float(fine[int(np.argmin(fine_scores))])
    fit = fit_at_offset(data, chosen, restarts, seed)
    return PowerLawFit("joint_irr", fit.params, fit.offsets, fit.residual, fit.objective, restarts,
                       tuple(float(c) for c in np.concatenate([grid, fine])))


def bcrit_power_law(points: Sequence[tuple[float, float]], restarts: int = 64, seed: int = 0) -> tuple[float, float]:
    """Fit ``B_crit(D) = a * D**alpha``; returns ``(a, alpha)``."""
    data = [FitDatum("bcrit", d, b) for d, b in points]
    fit = fit_power_law(data, "plain", restarts, seed)
    return fit.params["bcrit"]


@dataclass(frozen=True)
class CriticalBatch:
    b_opt: float
    b_crit: float
    boundary: bool


def critical_batch(batches: Sequence[float], losses: Sequence[float], tolerance: float = 0.01) -> CriticalBatch:
    """Optimal batch and the largest batch whose loss is within ``(1 + tolerance)`` of the best.

    ``boundary`` is set when the best loss sits at the smallest or largest tested batch.
    """
    if len(batches) != len(losses) or len(batches) < 1:
        raise ValueError("need matching, non-empty batch and loss lists")
    pairs = sorted(zip((float(b) for b in batches), (float(x) for x in losses)))
    bs = [b for b, _ in pairs]
    if len(set(bs)) != len(bs):
        raise ValueError("batch sizes must be distinct")
    best = min(range(len(pairs)), key=lambda i: (pairs[i][1], pairs[i][0]))
    limit = (1.0 + tolerance) * pairs[best][1]
    crit = max(b for b, x in pairs if x <= limit)
    return CriticalBatch(pairs[best][0], crit, best in (0, len(pairs) - 1))


CHINCHILLA_TOKENS_PER_PARAM = 20.0
FLOPS_PER_PARAM_TOKEN = 6.0


def tokens_for_compute(c):
    """Compute-optimal tokens: ``D = 20 N`` and ``C = 6 N D`` give ``D = sqrt(C * 20 / 6)``."""
    return np.sqrt(np.asarray(c, dtype=np.float64) * CHINCHILLA_TOKENS_PER_PARAM / FLOPS_PER_PARAM_TOKEN)


@dataclass(frozen=True)
class EfficiencyCurve:
    time: np.ndarray
    ratio: dict[str, np.ndarray]


def _time_of_compute(c: np.ndarray, bcrit: tuple[float, float]) -> np.ndarray:
    a, alpha = bcrit
    return c / (a * tokens_for_compute(c) ** alpha)


def efficiency_curve(loss_fits: Mapping[str, tuple[PowerLawFit, str]], bcrit_fits: Mapping[str, tuple[float, float]],
                     baseline: str, compute_grid: Sequence[float], points: int = 64) -> EfficiencyCurve:
    """``L_base(C_base(T)) / L_m(C_m(T))`` on a grid of sequential-time proxies ``T = C / B_crit(C)``.

    ``loss_fits`` maps each method to ``(fit, label in fit)``. The time grid
    spans the range reachable by every method over ``compute_grid``.
    """
    c = np.asarray(compute_grid, dtype=np.float64)
    if c.ndim != 1 or len(c) < 2 or np.any(c <= 0) or np.any(np.diff(c) <= 0):
        raise ValueError("compute_grid must be increasing and positive")
    log_t = {}
    for m in loss_fits:
        t = np.log(_time_of_compute(c, bcrit_fits[m]))
        if np.any(np.diff(t) <= 0):
            raise InversionError(f"T(C) is not increasing for method {m!r}; cannot invert")
        log_t[m] = t
    lo = max(t[0] for t in log_t.values())
    hi = min(t[-1] for t in log_t.values())
    if not lo < hi:
        raise InversionError("methods share no common training-time range")
    grid = np.linspace(lo, hi, points)
    loss_at_t = {}
    for m, (fit, label) in loss_fits.items():
        log_c = np.interp(grid, log_t[m], np.log(c))
        loss_at_t[m] = fit.predict(label, np.exp(log_c))
    return EfficiencyCurve(np.exp(grid), {m: loss_at_t[baseline] / v for m, v in loss_at_t.items()})


FIT_COLUMNS = ("method", "K", "N_params", "tokens", "batch_tokens", "loss")


@dataclass(frozen=True)
class RunRecord:
    method: str
    workers: int
    n_params: float
    tokens: float
    batch_tokens: float
    loss: float

    @property
    def compute(self) -> float:
        return FLOPS_PER_PARAM_TOKEN * self.n_params * self.tokens


def read_records(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = set(FIT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [RunRecord(r["method"], int(r["K"]), float(r["N_params"]), float(r["tokens"]),
                          float(r["batch_tokens"] or "nan"), float(r["loss"])) for r in reader]


def records_to_data(records: Iterable[RunRecord], x: str = "compute") -> list[FitDatum]:
    """Fit inputs keyed by compute (``6 N D``), ``tokens`` or ``batch_tokens``.

    Each (method, K) pair becomes its own series, labelled ``"<method>/K<K>"``.
    """
    getter = {"compute": lambda r: r.compute, "tokens": lambda r: r.tokens,
              "batch_tokens": lambda r: r.batch_tokens}[x]
    return [FitDatum(series_label(r.method, r.workers), getter(r), r.loss, r.workers) for r in records]


def series_label(method: str, workers: int) -> str:
    return f"{method}/K{workers}"
