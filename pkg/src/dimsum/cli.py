"""Command-line entry points: train, sample, eval, perm-dump, selfcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint
from .config import RunConfig, from_dict, load_config
from .data import KINDS, ToyDataset, generate
from .metrics import FrechetStats, frechet_distance, split_half_baseline
from .model import DiMSUM, ModelConfig, transformer_param_count
from .scan_orders import ScanKind, make_order


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dimsum", description="Desk-scale DiMSUM diffusion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--seed", type=int)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--w", type=float, default=1.0, help="guidance scale")
    s.add_argument("--method", choices=("euler", "heun", "dopri5"), default="dopri5")
    s.add_argument("--rtol", type=float, default=1e-5)
    s.add_argument("--atol", type=float, default=1e-5)
    s.add_argument("--steps", type=int, default=20, help="steps for euler/heun")
    s.add_argument("--class", dest="cls", type=int, help="class id (default: cycle through classes)")

    e = sub.add_parser("eval", help="Frechet distance of samples vs a dataset spec")
    e.add_argument("--config", help="JSON config naming the dataset (defaults if omitted)")
    e.add_argument("--dir", help="sample directory holding samples.npy")
    e.add_argument("--kind", choices=KINDS)
    e.add_argument("--n", type=int, default=4096, help="reference set size")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--ckpt", help="checkpoint for --report")
    e.add_argument("--report", action="store_true", help="print parameter and FLOP counts")

    d = sub.add_parser("perm-dump", help="print a scan permutation")
    d.add_argument("--kind", required=True, choices=[k.value for k in ScanKind])
    d.add_argument("--dir", type=int, default=0)
    d.add_argument("--height", type=int, required=True)
    d.add_argument("--width", type=int, required=True)
    d.add_argument("--level", type=int, default=1)

    c = sub.add_parser("selfcheck", help="run the property checks")
    c.add_argument("--seed", type=int, default=0)
    return p


def _write_pnm(path: Path, img: np.ndarray) -> None:
    """(C, H, W) in [-1, 1] -> binary PGM (C=1) or PPM (C=3)."""
    px = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    C, H, W = px.shape
    magic = b"P5" if C == 1 else b"P6"
    body = px[0] if C == 1 else px[:3].transpose(1, 2, 0)
    path.write_bytes(magic + f"\n{W} {H}\n255\n".encode() + body.tobytes())


def _grid(x: np.ndarray, cols: int = 8) -> np.ndarray:
    n, C, H, W = x.shape
    rows = -(-n // cols)
    out = np.full((C, rows * (H + 1) + 1, cols * (W + 1) + 1), -1.0)
    for i, img in enumerate(x):
        r, c = divmod(i, cols)
        out[:, 1 + r * (H + 1):1 + r * (H + 1) + H, 1 + c * (W + 1):1 + c * (W + 1) + W] = img
    return out


def cmd_train(args) -> int:
    from .pipeline import train_run

    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = from_dict(raw)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    run = train_run(cfg, out, verbose=True)
    print(f"trained {len(run.losses)} steps in {run.seconds:.1f}s; final loss {run.losses[-1]:.5f}")
    print(f"checkpoint: {out / 'final.dmsm'}")
    return 0


def cmd_sample(args) -> int:
    from .pipeline import draw
    from .sampler import SolverConfig

    model, meta = load_checkpoint(args.ckpt)
    K = model.cfg.num_classes
    classes = None
    if K:
        classes = np.full(args.n, args.cls) if args.cls is not None else np.arange(args.n) % K
    solver = SolverConfig(args.method, args.rtol, args.atol, steps=args.steps)
    x, nfes = draw(model, args.n, classes, args.w, solver, args.seed,
                   meta.get("mean"), meta.get("std"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", x)
    if classes is not None:
        np.save(out / "labels.npy", classes)
    _write_pnm(out / ("preview.ppm" if x.shape[1] == 3 else "preview.pgm"), _grid(x[:64]))
    print(f"wrote {x.shape} to {out / 'samples.npy'}; NFE per chunk {nfes}")
    return 0


def _report(cfg: ModelConfig, ckpt: str | None) -> None:
    model = load_checkpoint(ckpt)[0] if ckpt else DiMSUM(cfg)
    cfg = model.cfg
    x = np.zeros((1, cfg.in_channels, cfg.image_size, cfg.image_size), dtype=model.dtype)
    c = np.zeros(1, dtype=np.intp) if cfg.num_classes else None
    with T.no_grad(), T.count_flops() as fc:
        model(x, 0.5, c)
    blk = transformer_param_count(model)
    print(f"parameters: {model.num_parameters()}")
    print(f"transformer block: {blk} x {cfg.insertions} insertions "
          f"({'shared' if cfg.shared_transformer else 'independent'})")
    if cfg.shared_transformer:
        print(f"independent-variant equivalent: {model.num_parameters() + (cfg.insertions - 1) * blk}")
    detail = ", ".join(f"{k} {v / 1e6:.2f}M" for k, v in sorted(fc.by_op.items()))
    print(f"forward FLOPs per image: {fc.total / 1e6:.2f}M ({detail})")


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.report:
        _report(cfg.model, args.ckpt)
    spec = cfg.data
    kind = args.kind or spec.kind
    ref_spec = ToyDataset(kind, args.n, spec.channels, spec.height, spec.width,
                          spec.seed + 1_000_003 + args.seed, spec.noise)
    ref, _ = generate(ref_spec)
    base = split_half_baseline(ref)
    print(f"split-half baseline ({args.n // 2} vs {args.n // 2}): {base:.6f}")
    if args.dir:
        x = np.load(Path(args.dir) / "samples.npy")
        if x.shape[1:] != ref.shape[1:]:
            raise SystemExit(f"samples have shape {x.shape[1:]}, dataset {ref.shape[1:]}")
        fd = frechet_distance(FrechetStats.from_samples(x), FrechetStats.from_samples(ref[:len(ref) // 2]))
        print(f"frechet distance ({len(x)} samples): {fd:.6f}  ratio {fd / base:.3f}")
    return 0


def cmd_perm_dump(args) -> int:
    order = make_order(args.kind, args.dir, args.height, args.width, level=args.level)
    print(",".join(str(int(i)) for i in order.perm))
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(args.seed) else 1


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "perm-dump": cmd_perm_dump, "selfcheck": cmd_selfcheck}


def run_cli(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
