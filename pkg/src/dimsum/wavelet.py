"""Orthonormal Haar DWT / IDWT with full-subband multi-level recursion.

Kernel convention: the first filter letter acts on the vertical axis. Subbands
are stacked on the third-from-last axis in the order (LL, LH, HL, HH); at deeper
levels every child is decomposed again and the stack is flattened depth-first,
so the lowest-frequency subband is always first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, concat, patch_correlate, patch_correlate_transpose, reshape

HAAR_KERNELS = 0.5 * np.array([
    [[1.0, 1.0], [1.0, 1.0]],     # LL
    [[-1.0, 1.0], [-1.0, 1.0]],   # LH
    [[-1.0, -1.0], [1.0, 1.0]],   # HL
    [[1.0, -1.0], [-1.0, 1.0]],   # HH
])
SUBBAND_NAMES = ("LL", "LH", "HL", "HH")


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def dwt2d(x) -> Tensor:
    """(..., H, W) -> (..., 4, H/2, W/2) stacked as (LL, LH, HL, HH)."""
    x = _tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"dwt2d needs at least 2 axes, got shape {x.shape}")
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"dwt2d needs even extents, got {H}x{W}")
    return patch_correlate(x, HAAR_KERNELS)


def idwt2d(subbands) -> Tensor:
    """Inverse of :func:`dwt2d`; accepts the stacked tensor or four equal-shape maps."""
    if isinstance(subbands, (list, tuple)):
        if len(subbands) != 4:
            raise ShapeError(f"idwt2d needs 4 subbands, got {len(subbands)}")
        parts = [_tensor(s) for s in subbands]
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise ShapeError(f"subband shapes differ: {[p.shape for p in parts]}")
        shape = parts[0].shape
        subbands = concat([reshape(p, shape[:-2] + (1,) + shape[-2:]) for p in parts], axis=-3)
    y = _tensor(subbands)
    if y.ndim < 3 or y.shape[-3] != 4:
        raise ShapeError(f"idwt2d expects (..., 4, h, w), got {y.shape}")
    return patch_correlate_transpose(y, HAAR_KERNELS)


@dataclass
class WaveletStack:
    """All ``4**level`` subbands of a full-subband decomposition.

    ``coeffs`` has shape (..., 4**level, H / 2**level, W / 2**level).
    """

    level: int
    coeffs: Tensor

    @property
    def subbands(self) -> list[Tensor]:
        from .tensor import slice_axis
        return [slice_axis(self.coeffs, -3, i, i + 1).reshape(
            self.coeffs.shape[:-3] + self.coeffs.shape[-2:]) for i in range(self.count)]

    @property
    def count(self) -> int:
        return 4 ** self.level

    def energy(self) -> float:
        return float(np.sum(self.coeffs.data.astype(np.float64) ** 2))


def subband_path(index: int, level: int) -> str:
    """Human-readable name, e.g. index 1 at level 2 -> 'LL/LH'."""
    digits = []
    for _ in range(level):
        digits.append(SUBBAND_NAMES[index % 4])
        index //= 4
    return "/".join(reversed(digits))


def decompose(x, level: int) -> WaveletStack:
    x = _tensor(x)
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    H, W = x.shape[-2:]
    div = 2 ** level
    if H % div or W % div:
        raise ShapeError(f"extents {H}x{W} must be divisible by {div} for level {level}")
    lead = x.shape[:-2]
    coeffs = reshape(x, lead + (1, H, W))
    for _ in range(level):
        c = dwt2d(coeffs)  # (..., n, 4, h, w)
        s = c.shape
        coeffs = reshape(c, s[:-4] + (s[-4] * 4,) + s[-2:])
    return WaveletStack(level, coeffs)


def reconstruct(stack: WaveletStack) -> Tensor:
    c = stack.coeffs
    if c.ndim < 3 or c.shape[-3] != 4 ** stack.level:
        raise ShapeError(f"stack of level {stack.level} needs {4 ** stack.level} subbands, got shape {c.shape}")
    for _ in range(stack.level):
        s = c.shape
        c = idwt2d(reshape(c, s[:-3] + (s[-3] // 4, 4) + s[-2:]))
    s = c.shape
    return reshape(c, s[:-3] + s[-2:])


def subband_energy(x: np.ndarray, level: int) -> np.ndarray:
    """Per-subband sum of squares of a (C, H, W) map; length ``4**level``."""
    coeffs = decompose(Tensor(np.asarray(x, dtype=np.float64)), level).coeffs.data
    axes = tuple(i for i in range(coeffs.ndim) if i != coeffs.ndim - 3)
    return (coeffs ** 2).sum(axis=axes)


def stack_from_subbands(subbands: Sequence, level: int) -> WaveletStack:
    parts = [_tensor(s) for s in subbands]
    if len(parts) != 4 ** level:
        raise ShapeError(f"level {level} needs {4 ** level} subbands, got {len(parts)}")
    shape = parts[0].shape
    coeffs = concat([reshape(p, shape[:-2] + (1,) + shape[-2:]) for p in parts], axis=-3)
    return WaveletStack(level, coeffs)
