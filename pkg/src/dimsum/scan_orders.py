"""Token scanning orders on an H x W grid and on wavelet-subband layouts.

Every order is a permutation ``perm`` with ``out[i] = tokens[perm[i]]``; the
inverse permutation undoes it. Token ``r * W + c`` is grid cell (r, c).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, gather


class ScanKind(enum.Enum):
    BI = "bi"
    SWEEP4 = "sweep4"
    SWEEP8 = "sweep8"
    ZIGZAG8 = "zigzag8"
    JPEG8 = "jpeg8"
    WAVELET_WINDOW = "window"

    @classmethod
    def parse(cls, value) -> "ScanKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "").replace("_", ""))
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown scan kind {value!r}; expected one of {names}") from None


DIRECTION_COUNT = {
    ScanKind.BI: 2,
    ScanKind.SWEEP4: 4,
    ScanKind.SWEEP8: 8,
    ScanKind.ZIGZAG8: 8,
    ScanKind.JPEG8: 8,
    ScanKind.WAVELET_WINDOW: 2,
}
WINDOW_DIRECTIONS = ("LR", "TB")


@dataclass(frozen=True)
class ScanOrder:
    kind: ScanKind
    direction_index: int
    perm: np.ndarray
    inv_perm: np.ndarray = field(repr=False)
    grid: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.perm.size)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.perm.size)))


def _from_cells(kind, direction, cells, H, W, **grid) -> ScanOrder:
    perm = np.array([r * W + c for r, c in cells], dtype=np.intp)
    return _finish(kind, direction, perm, H=H, W=W, **grid)


def _finish(kind, direction, perm, **grid) -> ScanOrder:
    perm = np.ascontiguousarray(perm, dtype=np.intp)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    perm.setflags(write=False)
    inv.setflags(write=False)
    return ScanOrder(kind, direction, perm, inv, dict(grid))


def _raster(H, W):
    return [(r, c) for r in range(H) for c in range(W)]


def _column_raster(H, W):
    return [(r, c) for c in range(W) for r in range(H)]


def _serpentine(H, W):
    cells = []
    for r in range(H):
        cols = range(W) if r % 2 == 0 else range(W - 1, -1, -1)
        cells.extend((r, c) for c in cols)
    return cells


def _jpeg_zigzag(H, W):
    cells = []
    for s in range(H + W - 1):
        rows = range(max(0, s - W + 1), min(s, H - 1) + 1)
        if s % 2 == 0:
            rows = reversed(rows)
        cells.extend((r, s - r) for r in rows)
    return cells


def _dihedral(base, H, W, d):
    """Image of a base traversal under one of 8 grid symmetries.

    Bit 2 transposes (the base is then built on the W x H grid), bit 0 flips
    columns and bit 1 flips rows.
    """
    if d & 4:
        cells = [(c, r) for r, c in base(W, H)]
    else:
        cells = base(H, W)
    if d & 1:
        cells = [(r, W - 1 - c) for r, c in cells]
    if d & 2:
        cells = [(H - 1 - r, c) for r, c in cells]
    return cells


def _sweep(H, W, d):
    if d < 4:
        cells = _raster(H, W) if d < 2 else _column_raster(H, W)
    else:
        # flipped grids: row-major with columns mirrored, column-major with rows mirrored
        if d < 6:
            cells = [(r, W - 1 - c) for r, c in _raster(H, W)]
        else:
            cells = [(H - 1 - r, c) for r, c in _column_raster(H, W)]
    if d % 2 == 1:
        cells = cells[::-1]
    return cells


# Sweep8 lists the row-major family first (raster, reversed, mirrored, mirrored
# reversed), then the column-major family, so a four-block cycle differs from Sweep4.
_SWEEP8_ORDER = (0, 1, 4, 5, 2, 3, 6, 7)


def make_order(kind, direction_index: int, H: int, W: int, level: int = 1,
               window: int = 2) -> ScanOrder:
    kind = ScanKind.parse(kind)
    n = DIRECTION_COUNT[kind]
    if not 0 <= direction_index < n:
        raise ValueError(f"{kind.value} has {n} directions; got direction_index={direction_index}")
    if H < 1 or W < 1:
        raise ShapeError(f"grid must be non-empty, got {H}x{W}")
    if kind is ScanKind.WAVELET_WINDOW:
        return wavelet_window_order(level, H, W, WINDOW_DIRECTIONS[direction_index], window)
    if kind is ScanKind.SWEEP8:
        cells = _sweep(H, W, _SWEEP8_ORDER[direction_index])
    elif kind in (ScanKind.BI, ScanKind.SWEEP4):
        cells = _sweep(H, W, direction_index)
    elif kind is ScanKind.ZIGZAG8:
        cells = _dihedral(_serpentine, H, W, direction_index)
    else:
        cells = _dihedral(_jpeg_zigzag, H, W, direction_index)
    return _from_cells(kind, direction_index, cells, H, W)


def wavelet_window_order(level: int, H: int, W: int, direction: str = "LR",
                         window: int = 2) -> ScanOrder:
    """Window scan over the canonical subband-major token layout.

    Tokens are laid out subband by subband (low frequency first), each subband
    row-major. ``LR`` slides the window in raster order and reads it row-major;
    ``TB`` slides in column order and reads column-major. Level 0 is a plain
    image-space window scan.
    """
    direction = direction.upper()
    if direction not in WINDOW_DIRECTIONS:
        raise ValueError(f"window direction must be LR or TB, got {direction!r}")
    div = 2 ** level
    if H % div or W % div:
        raise ShapeError(f"grid {H}x{W} not divisible by {div} for level {level}")
    h, w = H // div, W // div
    if h < window or w < window or h % window or w % window:
        raise ShapeError(f"subband {h}x{w} cannot be tiled by {window}x{window} windows")
    nb = 4 ** level
    wins_r, wins_c = h // window, w // window
    if direction == "LR":
        win_cells = [(i, j) for i in range(wins_r) for j in range(wins_c)]
        inner = [(a, b) for a in range(window) for b in range(window)]
    else:
        win_cells = [(i, j) for j in range(wins_c) for i in range(wins_r)]
        inner = [(a, b) for b in range(window) for a in range(window)]
    local = np.array([(wi * window + a) * w + (wj * window + b)
                      for wi, wj in win_cells for a, b in inner], dtype=np.intp)
    perm = np.concatenate([s * h * w + local for s in range(nb)])
    return _finish(ScanKind.WAVELET_WINDOW, WINDOW_DIRECTIONS.index(direction), perm,
                   H=H, W=W, level=level, window=window)


def apply_order(x, order: ScanOrder, axis: int = 1, inverse: bool = False):
    """Reorder tokens along ``axis``: ``out[i] = x[perm[i]]`` (or the inverse)."""
    idx = order.inv_perm if inverse else order.perm
    if isinstance(x, Tensor):
        if x.shape[axis] != idx.size:
            raise ShapeError(f"sequence length {x.shape[axis]} != order length {idx.size}")
        return gather(x, idx, axis=axis)
    x = np.asarray(x)
    if x.shape[axis] != idx.size:
        raise ShapeError(f"sequence length {x.shape[axis]} != order length {idx.size}")
    return np.take(x, idx, axis=axis)


def block_orders(kind, block_index: int, H: int, W: int) -> list[ScanOrder]:
    """Orders used by the spatial branch of block ``block_index``.

    ``bi`` scans both directions in every block; the multi-direction kinds
    interleave, block i taking direction ``i mod count``.
    """
    kind = ScanKind.parse(kind)
    if kind is ScanKind.BI:
        return [make_order(kind, 0, H, W), make_order(kind, 1, H, W)]
    if kind is ScanKind.WAVELET_WINDOW:
        # image-space window scan (level 0), both sliding directions
        return [wavelet_window_order(0, H, W, d) for d in WINDOW_DIRECTIONS]
    return [make_order(kind, block_index % DIRECTION_COUNT[kind], H, W)]


def is_bijection(perm: np.ndarray) -> bool:
    perm = np.asarray(perm)
    return bool(np.array_equal(np.sort(perm), np.arange(perm.size)))
