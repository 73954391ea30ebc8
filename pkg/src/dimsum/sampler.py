"""Probability-flow ODE integration (Euler, Heun, Dormand-Prince 5(4)) and sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .flow import Schedule, cfg_velocity

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
DOPRI_STAGES = 7


class MaxStepsExceeded(RuntimeError):
    def __init__(self, t_reached: float, last_error: float, steps: int):
        super().__init__(f"dopri5 stopped after {steps} steps at t={t_reached:.6g} "
                         f"(last error norm {last_error:.3g})")
        self.t_reached = t_reached
        self.last_error = last_error


@dataclass
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10000
    steps: int = 20            # fixed-step methods
    initial_step: float | None = None
    guidance: float = 1.0
    nfe: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.method not in ("euler", "heun", "dopri5"):
            raise ValueError(f"method must be euler, heun or dopri5, got {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")


@dataclass
class IntegrationResult:
    x: np.ndarray
    nfe: int
    accepted: int = 0
    rejected: int = 0


def _counted(f, cfg: SolverConfig):
    def g(x, t):
        cfg.nfe += 1
        return f(x, t)
    return g


def integrate(f: Callable[[np.ndarray, float], np.ndarray], x1: np.ndarray,
              t_span=(1.0, 0.0), config: SolverConfig | None = None) -> IntegrationResult:
    cfg = config or SolverConfig()
    start_nfe = cfg.nfe
    fc = _counted(f, cfg)
    t0, t1 = float(t_span[0]), float(t_span[1])
    x = np.asarray(x1)
    if cfg.method in ("euler", "heun"):
        ts = np.linspace(t0, t1, cfg.steps + 1)
        for a, b in zip(ts[:-1], ts[1:]):
            h = b - a
            k1 = fc(x, a)
            if cfg.method == "euler":
                x = x + h * k1
            else:
                pred = x + h * k1
                x = x + 0.5 * h * (k1 + fc(pred, b))
        return IntegrationResult(x, cfg.nfe - start_nfe, accepted=cfg.steps)
    return _dopri5(fc, x, t0, t1, cfg, start_nfe)


def _rms_norm(err: np.ndarray, x: np.ndarray, x_new: np.ndarray, cfg: SolverConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, x, t0, k1, direction, cfg: SolverConfig) -> float:
    # Hairer-Wanner heuristic (order 5)
    scale = cfg.atol + np.abs(x) * cfg.rtol
    d0 = float(np.sqrt(np.mean((x / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((k1 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    x1 = x + direction * h0 * k1
    k2 = f(x1, t0 + direction * h0)
    d2 = float(np.sqrt(np.mean(((k2 - k1) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1)


def _dopri5(f, x, t0, t1, cfg: SolverConfig, start_nfe: int) -> IntegrationResult:
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    k1 = f(x, t)
    h = cfg.initial_step if cfg.initial_step is not None else _initial_step(f, x, t0, k1, direction, cfg)
    h = min(abs(h), span)
    accepted = rejected = 0
    err_norm = float("nan")
    while direction * (t1 - t) > 1e-12 * max(1.0, span):
        if accepted + rejected >= cfg.max_steps:
            raise MaxStepsExceeded(t, err_norm, accepted + rejected)
        h = min(h, abs(t1 - t))
        hs = direction * h
        k = [k1]
        for i in range(1, DOPRI_STAGES):
            xi = x + hs * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
            k.append(f(xi, t + _C[i] * hs))
        x_new = x + hs * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
        err = hs * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        err_norm = _rms_norm(err, x, x_new, cfg)
        if err_norm <= 1.0:
            t = t + hs if abs(t1 - (t + hs)) > 1e-12 * max(1.0, span) else t1
            x = x_new
            k1 = k[-1]  # first-same-as-last
            accepted += 1
        else:
            rejected += 1
        factor = 5.0 if err_norm == 0.0 else 0.9 * err_norm ** (-1.0 / 5.0)
        h *= min(5.0, max(0.2, factor))
    return IntegrationResult(x, cfg.nfe - start_nfe, accepted, rejected)


def sample(model, schedule: Schedule | None, c, w: float, config: SolverConfig,
           gen: np.random.Generator, n: int | None = None) -> IntegrationResult:
    """Draw ``x_1 ~ N(0, I)`` and integrate the learned velocity from t=1 to t=0.

    With class conditioning active and ``w != 1`` each velocity evaluation runs
    the model twice (conditional and null class) and mixes them with guidance.
    """
    del schedule  # the ODE is written directly in the network's time variable
    cfg_m = model.cfg
    if c is not None:
        c = np.asarray(c, dtype=np.intp).reshape(-1)
        n = c.size
    if n is None:
        raise ValueError("need class ids or a sample count")
    shape = (n, cfg_m.in_channels, cfg_m.image_size, cfg_m.image_size)
    x1 = gen.standard_normal(shape).astype(model.dtype)
    guided = c is not None and w != 1.0
    null = np.full(n, model.cond_embed.null_class, dtype=np.intp)

    def velocity(x, t):
        t = min(1.0, max(0.0, float(t)))
        with T.no_grad():
            xt = x.astype(model.dtype, copy=False)
            if not guided:
                return model(xt, t, c).data
            both = model(np.concatenate([xt, xt]), t, np.concatenate([c, null])).data
            return cfg_velocity(both[:n], both[n:], w)

    config.guidance = w
    result = integrate(velocity, x1, (1.0, 0.0), config)
    if guided:
        # two network passes per velocity evaluation
        result.nfe *= 2
    return result
