"""Pixel-space Frechet distance and template agreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSD_TOL = 1e-8


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "FrechetStats":
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if flat.shape[0] < 2:
            raise ValueError("need at least two samples for a covariance")
        return cls(flat.mean(axis=0), np.atleast_2d(np.cov(flat, rowvar=False)))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _sqrt_psd(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (clamped) and the symmetric square root of a PSD matrix."""
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min(initial=0.0) < -PSD_TOL * max(1.0, float(np.abs(vals).max(initial=0.0))):
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return vals, (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2)``.

    ``tr (S_a S_b)^1/2`` equals the sum of square roots of the eigenvalues of
    ``S_a^1/2 S_b S_a^1/2``, which is symmetric, so ``eigh`` suffices.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    _, root_a = _sqrt_psd(a.cov, "first covariance")
    _sqrt_psd(b.cov, "second covariance")
    vals, _ = _sqrt_psd(root_a @ b.cov @ root_a, "product")
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(vals).sum())
    return max(d, 0.0)


def split_half_baseline(x: np.ndarray, gen: np.random.Generator | None = None) -> float:
    """Distance between two disjoint halves of one sample set."""
    x = np.asarray(x)
    idx = np.arange(len(x)) if gen is None else gen.permutation(len(x))
    half = len(x) // 2
    return frechet_distance(FrechetStats.from_samples(x[idx[:half]]),
                            FrechetStats.from_samples(x[idx[half:2 * half]]))


def template_agreement(samples: np.ndarray, requested: np.ndarray, tmpl: np.ndarray) -> float:
    from .data import nearest_template

    return float(np.mean(nearest_template(samples, tmpl) == np.asarray(requested)))
