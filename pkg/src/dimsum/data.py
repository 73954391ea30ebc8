"""Deterministic toy image datasets standing in for the large benchmarks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import rng
from .wavelet import idwt2d, subband_energy
from .tensor import Tensor

KINDS = ("gmm", "checkerboard", "freqbars")
NUM_TEMPLATES = 4


@dataclass
class ToyDataset:
    kind: str = "gmm"
    count: int = 1024
    channels: int = 3
    height: int = 16
    width: int = 16
    seed: int = 0
    noise: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")

    @property
    def num_classes(self) -> int:
        return NUM_TEMPLATES

    def to_dict(self) -> dict:
        return asdict(self)


def templates(channels: int, height: int, width: int) -> np.ndarray:
    """Four well-separated patterns in [-1, 1], shape (4, C, H, W)."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    rows = np.where((np.arange(height) // 2) % 2 == 0, 1.0, -1.0)[:, None] * np.ones((1, width))
    cols = rows.T if height == width else np.where((np.arange(width) // 2) % 2 == 0, 1.0, -1.0)[None, :] * np.ones((height, 1))
    blob = 2.0 * np.exp(-3.0 * (xx ** 2 + yy ** 2)) - 1.0
    diag = np.clip(2.0 * (xx + yy), -1.0, 1.0)
    patterns = [rows, cols, blob, diag]
    out = np.empty((NUM_TEMPLATES, channels, height, width))
    for k, pat in enumerate(patterns):
        for c in range(channels):
            # per-channel tint keeps colour images distinct as well
            sign = 1.0 if (k + c) % 3 else -1.0
            out[k, c] = sign * pat
    return out


def _balanced_labels(count: int, gen: np.random.Generator) -> np.ndarray:
    # every aligned run of 4 holds each class once, so any even split stays balanced
    blocks = -(-count // NUM_TEMPLATES)
    return gen.permuted(np.tile(np.arange(NUM_TEMPLATES), (blocks, 1)), axis=1).reshape(-1)[:count]


def _checkerboards(spec: ToyDataset, gen: np.random.Generator):
    cell = 4 if min(spec.height, spec.width) >= 8 else 2
    oy = gen.integers(0, cell, spec.count)
    ox = gen.integers(0, cell, spec.count)
    r = np.arange(spec.height)[None, :, None]
    c = np.arange(spec.width)[None, None, :]
    parity = (((r + oy[:, None, None]) // cell + (c + ox[:, None, None]) // cell) % 2) * 2.0 - 1.0
    phase = (oy * cell + ox) % NUM_TEMPLATES
    x = np.repeat(parity[:, None], spec.channels, axis=1)
    x = x + spec.noise * gen.standard_normal(x.shape)
    return x, phase.astype(np.int64)


def _frequency_bars(spec: ToyDataset, gen: np.random.Generator):
    h, w = spec.height // 2, spec.width // 2
    band = gen.integers(0, 4, spec.count)
    coeffs = spec.noise * gen.standard_normal((spec.count, spec.channels, 4, h, w))
    bars = gen.standard_normal((spec.count, spec.channels, 1, w))  # vertical bars in the chosen band
    idx = np.arange(spec.count)
    coeffs[idx, :, band] = np.broadcast_to(bars, (spec.count, spec.channels, h, w))
    x = idwt2d(Tensor(coeffs)).data
    return x, band.astype(np.int64)


def generate(spec: ToyDataset) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(images, labels)``: float32 (count, C, H, W) and int64 (count,)."""
    shape = (spec.count, spec.channels, spec.height, spec.width)
    if spec.count == 0:
        return np.zeros(shape, dtype=np.float32), np.zeros(0, dtype=np.int64)
    gen = rng(spec.seed, f"dataset:{spec.kind}")
    if spec.kind == "gmm":
        labels = _balanced_labels(spec.count, gen)
        x = templates(spec.channels, spec.height, spec.width)[labels]
        x = x + spec.noise * gen.standard_normal(shape)
    elif spec.kind == "checkerboard":
        x, labels = _checkerboards(spec, gen)
    else:
        x, labels = _frequency_bars(spec, gen)
    return x.astype(np.float32), labels.astype(np.int64)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x * std[None, :, None, None] + mean[None, :, None, None]).astype(np.float32)


def nearest_template(x: np.ndarray, tmpl: np.ndarray) -> np.ndarray:
    """Index of the closest template (L2) for each image."""
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    t = tmpl.reshape(tmpl.shape[0], -1)
    d = (flat ** 2).sum(1)[:, None] - 2.0 * flat @ t.T + (t ** 2).sum(1)[None, :]
    return d.argmin(axis=1)


def band_fraction(x: np.ndarray, band: int, level: int = 1) -> float:
    """Share of an image's wavelet energy held by subband ``band``."""
    e = subband_energy(x, level)
    return float(e[band] / e.sum())
