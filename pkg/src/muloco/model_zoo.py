"""Small differentiable tasks with analytic gradients.

A task exposes its parameter declarations, an initializer, a batch sampler
driven by a caller-supplied numpy ``Generator``, ``loss_and_grad`` on a
batch, and a noise-free ``eval_loss``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

ParamSet = dict[str, np.ndarray]
Batch = tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ParamDecl:
    name: str
    shape: tuple[int, ...]
    hidden: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ModelTask:
    """Interface shared by the synthetic tasks."""

    name: str = "task"
    params: tuple[ParamDecl, ...] = ()
    optimum_loss: float | None = None

    def init_params(self) -> ParamSet:
        raise NotImplementedError

    def sample_batch(self, rng: np.random.Generator, size: int) -> Batch:
        raise NotImplementedError

    def loss_and_grad(self, params: Mapping[str, np.ndarray], batch: Batch) -> tuple[float, ParamSet]:
        raise NotImplementedError

    def eval_loss(self, params: Mapping[str, np.ndarray]) -> float:
        raise NotImplementedError

    def hidden(self, name: str) -> bool:
        return next(p.hidden for p in self.params if p.name == name)

    @staticmethod
    def take(batch: Batch, idx) -> Batch:
        return tuple(part[idx] for part in batch)


def _spd(dim: int, condition_number: float, rng: np.random.Generator) -> np.ndarray:
    if condition_number == 1.0:
        return np.eye(dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eig = np.geomspace(1.0 / condition_number, 1.0, dim)
    a = (q * eig) @ q.T
    return (a + a.T) / 2.0


class QuadraticBowl(ModelTask):
    """``sum_b 1/2 tr((W_b - W*_b)^T A (W_b - W*_b))`` over ``n_blocks`` matrices.

    A stochastic batch of size ``n`` is ``n`` Gaussian gradient-noise draws; the
    batch loss adds ``<mean noise, W - W*>`` so its gradient is
    ``A (W - W*) + mean noise`` (noise scale ``noise_std / sqrt(n)``).
    """

    def __init__(self, dim: int, condition_number: float = 10.0, seed: int = 0, cols: int | None = None,
                 n_blocks: int = 1, noise_std: float = 1.0):
        if dim < 1 or condition_number < 1.0 or n_blocks < 1:
            raise ValueError("need dim >= 1, condition_number >= 1, n_blocks >= 1")
        cols = dim if cols is None else cols
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
        self.name = "quadratic_bowl"
        self.dim, self.cols, self.n_blocks = dim, cols, n_blocks
        self.noise_std = noise_std
        self.a = _spd(dim, float(condition_number), rng)
        self.target = {f"w{b}": rng.standard_normal((dim, cols)) for b in range(n_blocks)}
        self.params = tuple(ParamDecl(f"w{b}", (dim, cols), hidden=cols > 1) for b in range(n_blocks))
        self.optimum_loss = 0.0

    def init_params(self) -> ParamSet:
        return {p.name: np.zeros(p.shape) for p in self.params}

    def sample_batch(self, rng, size):
        return (self.noise_std * rng.standard_normal((size, self.n_blocks, self.dim, self.cols)),)

    def _loss_grad(self, params, noise_mean):
        loss = 0.0
        grads = {}
        for b, p in enumerate(self.params):
            d = params[p.name] - self.target[p.name]
            ad = self.a @ d
            loss += 0.5 * float(np.sum(d * ad))
            g = ad
            if noise_mean is not None:
                loss += float(np.sum(noise_mean[b] * d))
                g = g + noise_mean[b]
            grads[p.name] = g
        return loss, grads

    def loss_and_grad(self, params, batch):
        (noise,) = batch
        return self._loss_grad(params, noise.mean(axis=0))

    def eval_loss(self, params):
        return self._loss_grad(params, None)[0]


class TwoLayerMLP(ModelTask):
    """Teacher-student regression ``y = W2 tanh(W1 x + b1) + b2``.

    Weights are Muon-governed hidden matrices; biases are not.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0,
                 noise_std: float = 0.0, eval_size: int = 1024):
        if min(in_dim, hidden_dim, out_dim) < 1:
            raise ValueError("dimensions must be >= 1")
        self.name = "two_layer_mlp"
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.noise_std = noise_std
        self.seed = seed
        self.params = (
            ParamDecl("W1", (hidden_dim, in_dim), True),
            ParamDecl("b1", (hidden_dim,), False),
            ParamDecl("W2", (out_dim, hidden_dim), True),
            ParamDecl("b2", (out_dim,), False),
        )
        teacher_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
        self.teacher = {
            "W1": teacher_rng.standard_normal((hidden_dim, in_dim)) * np.sqrt(2.0 / in_dim),
            "b1": 0.3 * teacher_rng.standard_normal(hidden_dim),
            "W2": teacher_rng.standard_normal((out_dim, hidden_dim)) / np.sqrt(hidden_dim),
            "b2": 0.3 * teacher_rng.standard_normal(out_dim),
        }
        eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7]))
        x = eval_rng.standard_normal((eval_size, in_dim))
        self._eval = (x, self.forward(self.teacher, x)[0])
        self.optimum_loss = 0.0

    def init_params(self) -> ParamSet:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x1A]))
        return {
            "W1": rng.standard_normal((self.hidden_dim, self.in_dim)) / np.sqrt(self.in_dim),
            "b1": np.zeros(self.hidden_dim),
            "W2": rng.standard_normal((self.out_dim, self.hidden_dim)) / np.sqrt(self.hidden_dim),
            "b2": np.zeros(self.out_dim),
        }

    @staticmethod
    def forward(params, x):
        act = np.tanh(x @ params["W1"].T + params["b1"])
        return act @ params["W2"].T + params["b2"], act

    def sample_batch(self, rng, size):
        x = rng.standard_normal((size, self.in_dim))
        y = self.forward(self.teacher, x)[0]
        if self.noise_std:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return x, y

    def loss_and_grad(self, params, batch):
        x, y = batch
        n = x.shape[0]
        pred, act = self.forward(params, x)
        resid = pred - y
        loss = 0.5 * float(np.sum(resid * resid)) / n
        r = resid / n
        d_act = (r @ params["W2"]) * (1.0 - act * act)
        grads = {
            "W1": d_act.T @ x,
            "b1": d_act.sum(axis=0),
            "W2": r.T @ act,
            "b2": r.sum(axis=0),
        }
        return loss, grads

    def eval_loss(self, params):
        x, y = self._eval
        resid = self.forward(params, x)[0] - y
        return 0.5 * float(np.sum(resid * resid)) / x.shape[0]


def quadratic_bowl(dim: int, condition_number: float = 10.0, seed: int = 0, **kwargs) -> QuadraticBowl:
    return QuadraticBowl(dim, condition_number, seed, **kwargs)


def two_layer_mlp(in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0, **kwargs) -> TwoLayerMLP:
    return TwoLayerMLP(in_dim, hidden_dim, out_dim, seed, **kwargs)


TASKS: dict[str, Callable[..., ModelTask]] = {
    "quadratic_bowl": quadratic_bowl,
    "two_layer_mlp": two_layer_mlp,
}


def gradient_check(task: ModelTask, params: Mapping[str, np.ndarray], batch: Batch,
                   probes: int = 100, h: float = 1e-4, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference partials.

    Relative error is ``|fd - g| / max(|fd| + |g|, 1e-6)``; the floor keeps
    coordinates with vanishing gradient from dominating.
    """
    rng = np.random.default_rng(seed)
    _, grads = task.loss_and_grad(params, batch)
    names = [p.name for p in task.params]
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat_idx = int(rng.integers(params[name].size))
        idx = np.unravel_index(flat_idx, params[name].shape)
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        fd = (task.loss_and_grad(plus, batch)[0] - task.loss_and_grad(minus, batch)[0]) / (2 * h)
        g = grads[name][idx]
        worst = max(worst, abs(fd - g) / max(abs(fd) + abs(g), 1e-6))
    return worst
