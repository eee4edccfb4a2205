"""Per-worker inner optimizers: AdamW and Muon, both with decoupled weight decay.

Steps are pure functions ``(theta, grad, state, cfg) -> (theta', state')``.
They work on any array shape for AdamW; Muon requires 2-D hidden matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from muloco.linalg import newton_schulz


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    ns_iterations: int = 5
    lr_shape_rescale: bool = True
    # lr used by the AdamW fallback for non-hidden parameters in muon mode
    aux_lr: float | None = None

    def __post_init__(self):
        if self.algorithm not in ("adamw", "muon"):
            raise ValueError(f"unknown inner algorithm {self.algorithm!r}")
        for name in ("lr", "beta1", "beta2", "epsilon", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.ns_iterations < 1:
            raise ValueError("ns_iterations must be >= 1")

    def fallback(self) -> "OptimConfig":
        """AdamW settings for parameters Muon does not govern."""
        lr = self.lr if self.aux_lr is None else self.aux_lr
        return replace(self, algorithm="adamw", lr=lr)


@dataclass(frozen=True)
class AdamwState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "AdamwState":
        return cls(np.zeros_like(theta, dtype=np.float64), np.zeros_like(theta, dtype=np.float64), 0)


@dataclass(frozen=True)
class MuonState:
    m: np.ndarray

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "MuonState":
        return cls(np.zeros_like(theta, dtype=np.float64))


def _check_shapes(theta, grad, *others):
    for arr in (grad, *others):
        if arr.shape != theta.shape:
            raise ValueError(f"shape mismatch: parameter {theta.shape} vs {arr.shape}")


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: AdamwState, cfg: OptimConfig,
               lr: float | None = None) -> tuple[np.ndarray, AdamwState]:
    """One bias-corrected AdamW step; ``lr`` overrides ``cfg.lr`` (schedules)."""
    _check_shapes(theta, grad, state.m, state.v)
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    step = state.step_count + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * (grad * grad)
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    update = lr * (m_hat / (np.sqrt(v_hat) + cfg.epsilon))
    new_theta = theta * (1.0 - lr * cfg.weight_decay) - update
    return new_theta, AdamwState(m, v, step)


def muon_lr(shape: tuple[int, ...], cfg: OptimConfig, lr: float | None = None) -> float:
    """Effective Muon lr; ``sqrt(cols / rows)`` rescale for an ``rows x cols`` matrix."""
    lr = cfg.lr if lr is None else lr
    if cfg.lr_shape_rescale:
        rows, cols = shape
        return lr * math.sqrt(cols / rows)
    return lr


def muon_step(theta: np.ndarray, grad: np.ndarray, state: MuonState, cfg: OptimConfig,
              lr: float | None = None) -> tuple[np.ndarray, MuonState]:
    if theta.ndim != 2:
        raise ValueError("Muon governs 2-D matrices only")
    _check_shapes(theta, grad, state.m)
    m = cfg.beta1 * state.m + grad
    ortho = newton_schulz(m, cfg.ns_iterations)
    eta = muon_lr(theta.shape, cfg, lr)
    new_theta = theta * (1.0 - eta * cfg.weight_decay) - eta * ortho
    return new_theta, MuonState(m)


def step_record(theta_before: np.ndarray, theta_after: np.ndarray) -> np.ndarray:
    """The applied step ``theta_before - theta_after`` (weight decay included)."""
    if theta_before.shape != theta_after.shape:
        raise ValueError(f"shape mismatch: {theta_before.shape} vs {theta_after.shape}")
    return theta_before - theta_after


def init_state(theta: np.ndarray, cfg: OptimConfig, hidden: bool):
    if cfg.algorithm == "muon" and hidden and theta.ndim == 2:
        return MuonState.zeros_like(theta)
    return AdamwState.zeros_like(theta)


def apply_step(theta, grad, state, cfg: OptimConfig, lr_scale: float = 1.0):
    """Dispatch on the state type; ``lr_scale`` multiplies the configured lr."""
    if isinstance(state, MuonState):
        return muon_step(theta, grad, state, cfg, lr=cfg.lr * lr_scale)
    sub = cfg.fallback() if cfg.algorithm == "muon" else cfg
    return adamw_step(theta, grad, state, sub, lr=sub.lr * lr_scale)


def step_lr(theta: np.ndarray, state, cfg: OptimConfig, lr_scale: float = 1.0) -> float:
    """The scalar lr multiplying the step direction for this parameter."""
    if isinstance(state, MuonState):
        return muon_lr(theta.shape, cfg, cfg.lr * lr_scale)
    sub = cfg.fallback() if cfg.algorithm == "muon" else cfg
    return sub.lr * lr_scale
