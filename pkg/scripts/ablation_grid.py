"""Short training runs over every fusion variant and scan kind; prints loss summaries.

    python scripts/ablation_grid.py [--steps 200] [--full]

By default a reduced model (width 16, 8x8 images) keeps the grid to about a
minute; ``--full`` uses the desk config instead.
"""

import argparse

import numpy as np

from dimsum.config import from_dict
from dimsum.data import channel_stats, generate, normalize
from dimsum.flow import train
from dimsum.fusion import FusionVariant
from dimsum.model import DiMSUM
from dimsum.scan_orders import ScanKind

REDUCED = dict(in_channels=3, image_size=8, patch_size=2, width=16, depth=4, attn_every=2, wavelet_level=1,
               heads=2, state_dim=2, time_freq_dim=16, batch_size=8, lr=1e-3, data_count=256)


def run(base: dict, **overrides) -> np.ndarray:
    cfg = from_dict({**base, **overrides})
    x, labels = generate(cfg.data)
    return np.asarray(train(DiMSUM(cfg.model), normalize(x, *channel_stats(x)), labels, cfg.train))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    base = {"num_classes": 4, "steps": args.steps, **({} if args.full else REDUCED)}

    grid = sorted({(v.value, "sweep4") for v in FusionVariant} | {("swapq", k.value) for k in ScanKind})
    print(f"{'fusion/scan':<18} {'first10':>9} {'last20':>9} {'min':>9}")
    for fusion, scan in grid:
        losses = run(base, fusion=fusion, scan_kind=scan)
        print(f"{fusion + '/' + scan:<18} {losses[:10].mean():9.4f} {losses[-20:].mean():9.4f} {losses.min():9.4f}")


if __name__ == "__main__":
    main()
