"""Dense matrix kernel: validation, norms, a one-sided Jacobi SVD and the
quintic Newton-Schulz orthogonalization used by Muon.

Matrices are plain 2-D ``float64`` numpy arrays. Nothing here mutates its
inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NS_COEFFS = (3.4445, -4.7750, 2.0315)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


class ConvergenceError(RuntimeError):
    """Jacobi sweeps did not converge within the sweep cap."""


class NumericalOverflowError(FloatingPointError):
    pass


class UndefinedDirectionError(ValueError):
    """Cosine similarity requested for a zero matrix."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, rejecting NaN/Inf and empty shapes."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class Svd:
    """Thin SVD ``a = u @ diag(sigma) @ v.T`` with ``r = min(m, n)``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def orthonormal_factor(self) -> np.ndarray:
        return self.u @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament ordering: n-1 rounds of disjoint pairs covering every (p, q) once.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p_idx, q_idx = zip(*pairs)
            rounds.append((np.array(p_idx), np.array(q_idx)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(cols: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns where ``keep`` is False by unit vectors orthogonal to the rest."""
    m, r = cols.shape
    out = cols.copy()
    basis = [out[:, j] for j in range(r) if keep[j]]
    for j in range(r):
        if keep[j]:
            continue
        best, best_norm = None, -1.0
        for i in range(m):
            e = np.zeros(m)
            e[i] = 1.0
            for _ in range(2):
                for b in basis:
                    e = e - (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > best_norm + 1e-12:
                best, best_norm = e, nrm
        vec = best / best_norm
        out[:, j] = vec
        basis.append(vec)
    return out


def svd(a) -> Svd:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Each sweep visits every column pair once, in round-robin order so that
    disjoint pairs are rotated together. A pair is rotated while
    ``|<b_p, b_q>| > 1e-12 * |b_p| |b_q|``; the sweep with no rotation ends
    the iteration. Raises :class:`ConvergenceError` after 60 sweeps.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    transposed = m < n
    work = a.T if transposed else a
    rows, cols = work.shape
    # bt holds the columns of the working matrix as rows.
    bt = np.array(work.T, dtype=np.float64, copy=True)
    vt = np.eye(cols)
    schedule = _round_robin(cols)

    converged = cols == 1
    for _ in range(JACOBI_MAX_SWEEPS):
        if converged:
            break
        rotated = False
        for p, q in schedule:
            bp, bq = bt[p], bt[q]
            alpha = np.einsum("ij,ij->i", bp, bp)
            beta = np.einsum("ij,ij->i", bq, bq)
            gamma = np.einsum("ij,ij->i", bp, bq)
            active = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c, s = c[:, None], s[:, None]
            bp, bq = bt[p], bt[q]
            bt[p], bt[q] = c * bp - s * bq, s * bp + c * bq
            vp, vq = vt[p], vt[q]
            vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            converged = True
    if not converged:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->i", bt, bt))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    bt = bt[order]
    vt = vt[order]
    smax = sigma[0] if sigma.size else 0.0
    keep = sigma > max(smax * 1e-15, np.finfo(np.float64).tiny)
    u = np.zeros((rows, cols))
    u[:, keep] = (bt[keep] / sigma[keep, None]).T
    if not np.all(keep):
        u = _complete_orthonormal(u, keep)
    v = vt.T
    if transposed:
        u, v = v, u
    return Svd(u=u, sigma=sigma, v=v)


def singular_values(a) -> np.ndarray:
    return svd(a).sigma


def newton_schulz(m, iterations: int = 5) -> np.ndarray:
    """Approximately orthogonalize ``m`` with the quintic Newton-Schulz map.

    The input is scaled to unit Frobenius norm, then iterated as
    ``X <- a X + b (X X^T) X + c (X X^T)^2 X``. Tall inputs are transposed so
    the Gram matrix is the smaller one. A zero matrix maps to zero.
    """
    m = as_matrix(m, "m")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    peak = np.abs(m).max()
    if peak == 0.0:
        return np.zeros_like(m)
    # Scale by the largest entry first so the norm cannot overflow.
    x = m / peak
    x = x / np.linalg.norm(x)
    a, b, c = NS_COEFFS
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    for _ in range(iterations):
        with np.errstate(over="ignore", invalid="ignore"):
            gram = x @ x.T
            x = a * x + (b * gram + c * (gram @ gram)) @ x
        if not np.all(np.isfinite(x)):
            raise NumericalOverflowError("Newton-Schulz produced non-finite values")
    return np.ascontiguousarray(x.T) if tall else x


def frobenius_norm(a) -> float:
    return float(np.linalg.norm(as_matrix(a)))


def nuclear_norm(a) -> float:
    return float(np.sum(svd(a).sigma))


def frobenius_inner(a, b) -> float:
    """``Tr(a^T b)``."""
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _check_same_shape(a, b)
    return float(np.sum(a * b))


def cosine_sim(a, b) -> float:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _check_same_shape(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedDirectionError("cosine similarity of a zero matrix is undefined")
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))
