"""End-to-end helpers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import ToyDataset, channel_stats, denormalize, generate, normalize
from .flow import Schedule, train
from .model import DiMSUM
from .sampler import SolverConfig, sample


@dataclass
class TrainedRun:
    model: DiMSUM
    mean: np.ndarray
    std: np.ndarray
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def meta(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def train_run(cfg: RunConfig, out_dir: str | Path | None = None, verbose: bool = False) -> TrainedRun:
    """Generate the dataset, train, and (with ``out_dir``) write log and checkpoints."""
    x, labels = generate(cfg.data)
    mean, std = channel_stats(x)
    xn = normalize(x, mean, std)
    if not cfg.model.num_classes:
        labels = None
    model = DiMSUM(cfg.model)
    run = TrainedRun(model, mean, std)
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / cfg.run.log_path, "w")

    def on_step(step: int, loss: float) -> None:
        done = step + 1
        if out_dir is not None and cfg.run.ckpt_every and done % cfg.run.ckpt_every == 0:
            save_checkpoint(model, out_dir / f"ckpt_{done:06d}.dmsm", run.meta)
        if verbose and (done % 100 == 0 or done == 1):
            print(f"step {done:6d}  loss {loss:.5f}  {time.perf_counter() - start:7.1f}s", flush=True)

    start = time.perf_counter()
    try:
        run.losses = train(model, xn, labels, cfg.train, log=log, callback=on_step,
                           time_budget=cfg.run.time_budget)
    finally:
        if log is not None:
            log.close()
    run.seconds = time.perf_counter() - start
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.dmsm", run.meta)
    return run


def draw(model: DiMSUM, n: int, classes: np.ndarray | None, w: float, solver: SolverConfig,
         seed: int, mean: np.ndarray | None = None, std: np.ndarray | None = None,
         batch: int = 256) -> tuple[np.ndarray, list[int]]:
    """Sample ``n`` images in chunks; returns pixel-space images and per-chunk NFE."""
    gen = T.rng(seed, "sample")
    outs, nfes = [], []
    for lo in range(0, n, batch):
        hi = min(n, lo + batch)
        c = None if classes is None else np.asarray(classes)[lo:hi]
        cfg = SolverConfig(solver.method, solver.rtol, solver.atol, solver.max_steps,
                           solver.steps, solver.initial_step)
        res = sample(model, Schedule(), c, w, cfg, gen, n=hi - lo)
        outs.append(res.x)
        nfes.append(res.nfe)
    x = np.concatenate(outs) if outs else np.zeros((0,), dtype=np.float32)
    if mean is not None:
        x = denormalize(x, np.asarray(mean), np.asarray(std))
    return x, nfes


def held_out(spec: ToyDataset, count: int, offset: int = 1_000_003) -> tuple[np.ndarray, np.ndarray]:
    """Fresh draw from the same distribution with a shifted seed."""
    fresh = ToyDataset(spec.kind, count, spec.channels, spec.height, spec.width,
                       spec.seed + offset, spec.noise)
    return generate(fresh)
