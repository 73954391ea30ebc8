"""Train the desk-scale model, then report Frechet distance and template agreement.

    python scripts/train_desk.py [--config scripts/desk.json] [--out runs/desk] [--n 2048]
"""

import argparse
from pathlib import Path

import numpy as np

from dimsum.config import DESK_SAMPLER, load_config
from dimsum.data import NUM_TEMPLATES, templates
from dimsum.metrics import FrechetStats, frechet_distance, split_half_baseline, template_agreement
from dimsum.pipeline import draw, held_out, train_run
from dimsum.sampler import SolverConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).with_name("desk.json")))
    ap.add_argument("--out")
    ap.add_argument("--n", type=int, default=2048, help="samples for the Frechet distance")
    ap.add_argument("--w", type=float, default=1.4, help="guidance scale for template agreement")
    args = ap.parse_args()

    cfg = load_config(args.config)
    run = train_run(cfg, args.out or cfg.run.out_dir, verbose=True)
    print(f"trained {len(run.losses)} steps in {run.seconds:.0f}s")

    ref, _ = held_out(cfg.data, 2 * args.n)
    base = split_half_baseline(ref)
    solver = SolverConfig(**DESK_SAMPLER)
    classes = np.arange(args.n) % NUM_TEMPLATES
    x, _ = draw(run.model, args.n, classes, 1.0, solver, 10, run.mean, run.std)
    fd = frechet_distance(FrechetStats.from_samples(x), FrechetStats.from_samples(ref[: args.n]))
    print(f"split-half baseline {base:.4f}; frechet distance {fd:.4f} (ratio {fd / base:.2f}, bar 3.00)")

    gc = np.arange(512) % NUM_TEMPLATES
    xg, _ = draw(run.model, 512, gc, args.w, solver, 11, run.mean, run.std)
    tmpl = templates(cfg.data.channels, cfg.data.height, cfg.data.width)
    print(f"template agreement at w={args.w}: {template_agreement(xg, gc, tmpl):.3f}")


if __name__ == "__main__":
    main()
