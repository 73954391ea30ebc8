"""Flow-matching objective, classifier-free guidance and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, TextIO

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class Schedule:
    """Interpolant ``x_t = alpha(t) x + sigma(t) eps`` with alpha(0)=sigma(1)=1, alpha(1)=sigma(0)=0."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "gvp"):
            raise ValueError(f"schedule kind must be 'linear' or 'gvp', got {self.kind!r}")

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return 1.0 - t
        # cos is not exactly 0 at pi/2 in floating point; pin the endpoint
        return np.where(t == 1.0, 0.0, np.cos(HALF_PI * t))

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return t
        return np.sin(HALF_PI * t)

    def d_alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return np.full_like(t, -1.0)
        return -HALF_PI * np.sin(HALF_PI * t)

    def d_sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return np.ones_like(t)
        return np.where(t == 1.0, 0.0, HALF_PI * np.cos(HALF_PI * t))


def _per_item(coef, x: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def _check_time(t) -> None:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")


def interpolate(x: np.ndarray, eps: np.ndarray, t, schedule: Schedule) -> np.ndarray:
    """``x * alpha(t) + eps * sigma(t)``; ``t`` scalar or one value per leading item."""
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"data {x.shape} and noise {eps.shape} differ")
    _check_time(t)
    out = x * _per_item(schedule.alpha(t), x) + eps * _per_item(schedule.sigma(t), x)
    return out.astype(x.dtype, copy=False)


def velocity_target(x: np.ndarray, eps: np.ndarray, t, schedule: Schedule) -> np.ndarray:
    """Time derivative of :func:`interpolate` (``eps - x`` for the linear schedule)."""
    x, eps = np.asarray(x), np.asarray(eps)
    _check_time(t)
    out = x * _per_item(schedule.d_alpha(t), x) + eps * _per_item(schedule.d_sigma(t), x)
    return out.astype(x.dtype, copy=False)


def cfg_velocity(v_cond, v_uncond, w: float):
    """``v_uncond + w (v_cond - v_uncond)``; exactly ``v_cond`` at w = 1."""
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


def drop_labels(c: np.ndarray | None, p: float, null_class: int,
                gen: np.random.Generator) -> np.ndarray | None:
    if c is None:
        return None
    c = np.asarray(c, dtype=np.intp).copy()
    if p > 0:
        c[gen.random(c.shape[0]) < p] = null_class
    return c


def fm_loss(model: Callable, x: np.ndarray, c: np.ndarray | None, schedule: Schedule,
            gen: np.random.Generator, label_dropout: float = 0.0,
            null_class: int | None = None, t: np.ndarray | None = None,
            eps: np.ndarray | None = None) -> Tensor:
    """Mean squared error between ``model(x_t, t, c)`` and the velocity target.

    Draws ``t ~ U(0, 1)`` and ``eps ~ N(0, I)`` per item from ``gen`` unless
    given; labels are replaced by ``null_class`` with probability ``label_dropout``.
    """
    x = np.asarray(x)
    n = x.shape[0]
    t = gen.random(n) if t is None else np.asarray(t, dtype=np.float64)
    eps = gen.standard_normal(x.shape).astype(x.dtype) if eps is None else np.asarray(eps, dtype=x.dtype)
    if c is not None and label_dropout > 0:
        if null_class is None:
            raise ValueError("label dropout needs a null class id")
        c = drop_labels(c, label_dropout, null_class, gen)
    x_t = interpolate(x, eps, t, schedule)
    target = velocity_target(x, eps, t, schedule)
    pred = model(x_t, t, c)
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=x.dtype))
    return T.mean(T.square(T.sub(pred, Tensor(target))))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    clip: float = 2.0
    label_dropout: float = 0.15
    steps: int = 1000
    seed: int = 0
    schedule: str = "linear"
    lr_decay: str = "none"     # "none" | "cosine" (to zero at the last step)
    warmup: int = 0

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError(f"label_dropout must lie in [0, 1), got {self.label_dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.lr_decay == "cosine":
            span = max(1, self.steps - self.warmup)
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(1.0, (step - self.warmup) / span)))
        return self.lr


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params if p.grad is not None))

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = self.grad_norm()
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.dtype)
        return norm


class NonFiniteLoss(FloatingPointError):
    pass


def train_step(model: Module, optimizer: Adam, x: np.ndarray, c: np.ndarray | None,
               schedule: Schedule, gen: np.random.Generator, label_dropout: float = 0.0,
               step: int = 0) -> tuple[float, float]:
    """One optimiser update; returns ``(loss, grad_norm)``."""
    null = getattr(getattr(model, "cond_embed", None), "null_class", None)
    model.zero_grad()
    loss = fm_loss(model, x, c, schedule, gen, label_dropout, null)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} at step {step}")
    loss.backward()
    norm = optimizer.step()
    return value, norm


def train(model: Module, data: np.ndarray, labels: np.ndarray | None, cfg: TrainConfig,
          log: TextIO | None = None, callback: Callable[[int, float], None] | None = None,
          time_budget: float | None = None) -> list[float]:
    """Minibatch training; writes ``step,loss,grad_norm,lr`` records to ``log``.

    Batches are drawn with replacement from the "data" stream; noise, times and
    label dropout come from the "noise" stream. Stops early when
    ``time_budget`` seconds elapse.
    """
    import time

    schedule = Schedule(cfg.schedule)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)
    data_gen = T.rng(cfg.seed, "data")
    noise_gen = T.rng(cfg.seed, "noise")
    dtype = model.parameters()[0].dtype
    losses = []
    start = time.perf_counter()
    if log is not None:
        log.write("step,loss,grad_norm,lr\n")
    for step in range(cfg.steps):
        idx = data_gen.integers(0, data.shape[0], cfg.batch_size)
        xb = data[idx].astype(dtype, copy=False)
        cb = None if labels is None else labels[idx]
        opt.lr = cfg.lr_at(step)
        loss, norm = train_step(model, opt, xb, cb, schedule, noise_gen, cfg.label_dropout, step)
        losses.append(loss)
        if log is not None:
            log.write(f"{step},{loss:.8g},{norm:.8g},{opt.lr:.8g}\n")
        if callback is not None:
            callback(step, loss)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
    return losses
