"""Quick property checks run by ``dimsum selfcheck``."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .scan_orders import DIRECTION_COUNT, ScanKind, is_bijection, make_order
from .ssm import selective_scan, selective_scan_reference
from .tensor import Tensor
from .wavelet import decompose, reconstruct


def check_reconstruction(gen: np.random.Generator) -> tuple[bool, str]:
    worst = {np.float32: 0.0, np.float64: 0.0}
    for _ in range(40):
        level = int(gen.integers(1, 4))
        size = int(gen.choice([8, 16, 32]))
        x = gen.standard_normal((int(gen.integers(1, 5)), size, size))
        for dt in worst:
            xt = Tensor(x.astype(dt))
            err = float(np.abs(reconstruct(decompose(xt, level)).data - xt.data).max())
            worst[dt] = max(worst[dt], err)
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-12
    return ok, f"max error f32 {worst[np.float32]:.2e}, f64 {worst[np.float64]:.2e}"


def check_bijectivity(gen: np.random.Generator) -> tuple[bool, str]:
    del gen
    count = 0
    for kind in ScanKind:
        for d in range(DIRECTION_COUNT[kind]):
            for H in range(1, 17):
                for W in range(1, 17):
                    if kind is ScanKind.WAVELET_WINDOW and (H % 4 or W % 4):
                        continue
                    o = make_order(kind, d, H, W)
                    if not is_bijection(o.perm) or not np.array_equal(o.perm[o.inv_perm], np.arange(H * W)):
                        return False, f"{kind.value} dir {d} on {H}x{W} is not a bijection"
                    count += 1
    return True, f"{count} orders"


def check_scan_oracle(gen: np.random.Generator) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10):
        b, L, E, N = 2, int(gen.integers(1, 20)), int(gen.integers(1, 5)), int(gen.integers(1, 6))
        u = gen.standard_normal((b, L, E))
        delta = gen.uniform(0.01, 1.0, (b, L, E))
        A = -gen.uniform(0.1, 2.0, (E, N))
        Bt, Ct = gen.standard_normal((b, L, N)), gen.standard_normal((b, L, N))
        D, h0 = gen.standard_normal(E), gen.standard_normal((b, E, N))
        fast = selective_scan(*(Tensor(v) for v in (u, delta, A, Bt, Ct, D, h0))).data
        slow = selective_scan_reference(u, delta, A, Bt, Ct, D, h0)
        worst = max(worst, float(np.abs(fast - slow).max() / max(1.0, np.abs(slow).max())))
    return worst <= 1e-10, f"max relative error {worst:.2e}"


def check_gradients(gen: np.random.Generator) -> tuple[bool, str]:
    from .model import DiMBlock, ModelConfig

    def p(*shape):
        return Tensor(gen.standard_normal(shape), requires_grad=True)

    x, y = p(2, 3, 4), p(2, 3, 4)
    errs = {
        "mul": T.finite_diff_check(lambda: T.sum_(T.mul(x, y)), [x, y]),
        "softmax": T.finite_diff_check(lambda: T.sum_(T.mul(T.softmax(x), y)), [x]),
        "layer_norm": T.finite_diff_check(lambda: T.sum_(T.mul(T.layer_norm(x), y)), [x]),
    }
    cfg = ModelConfig(width=8, heads=2, image_size=8, patch_size=2, depth=1, attn_every=1)
    block = DiMBlock(cfg, 0, T.rng(0, "init"), dtype=np.float64)
    for prm in block.parameters():
        prm.data += 0.1 * gen.standard_normal(prm.shape)
    tok, cond = Tensor(gen.standard_normal((1, cfg.num_tokens, 8))), Tensor(gen.standard_normal((1, 8)))
    w = gen.standard_normal((1, cfg.num_tokens, 8))
    errs["dim_block"] = T.finite_diff_check(lambda: T.sum_(T.mul(block(tok, cond), w)),
                                            block.parameters(), eps=1e-6, max_coords=4)
    worst = max(errs.values())
    return worst <= 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


GROUPS: dict[str, Callable[[np.random.Generator], tuple[bool, str]]] = {
    "reconstruction": check_reconstruction,
    "bijectivity": check_bijectivity,
    "scan-oracle": check_scan_oracle,
    "gradients": check_gradients,
}


def run_selfcheck(seed: int = 0, out=print) -> bool:
    all_ok = True
    for name, fn in GROUPS.items():
        start = time.perf_counter()
        try:
            ok, detail = fn(T.rng(seed, f"selfcheck:{name}"))
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:<15} {detail}  ({time.perf_counter() - start:.1f}s)")
    return all_ok
