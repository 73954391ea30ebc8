"""The DiMSUM network: patch embedding, DiM blocks, shared transformer, output head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .fusion import Fusion, FusionVariant, multihead_attention
from .nn import Linear, Module, param
from .scan_orders import ScanKind, block_orders, wavelet_window_order
from .ssm import DirectionalMamba
from .tensor import ShapeError, Tensor
from .wavelet import WaveletStack, decompose, reconstruct


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 16
    patch_size: int = 2
    width: int = 64
    depth: int = 4
    attn_every: int = 4
    wavelet_level: int = 1
    heads: int = 4
    num_classes: int = 0
    label_dropout: float = 0.15
    scan_kind: str = "sweep4"
    state_dim: int = 4
    expand: int = 2
    conv_width: int = 4
    fusion: str = "swapq"
    shared_transformer: bool = True
    mlp_ratio: int = 4
    time_freq_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        ScanKind.parse(self.scan_kind)
        FusionVariant.parse(self.fusion)
        if self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.attn_every < 1 or self.depth % self.attn_every:
            raise ValueError(f"depth {self.depth} must be a multiple of attn_every {self.attn_every}")
        g = self.grid
        if self.wavelet_level and (g % (2 ** self.wavelet_level) or g // 2 ** self.wavelet_level < 2):
            raise ShapeError(f"token grid {g} too small for wavelet level {self.wavelet_level}")
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by {self.heads} heads")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError(f"label_dropout must lie in [0, 1), got {self.label_dropout}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def insertions(self) -> int:
        return self.depth // self.attn_every

    def to_dict(self) -> dict:
        return asdict(self)


DESK_CONFIG = dict(in_channels=3, image_size=16, patch_size=2, width=64, depth=4, attn_every=4,
                   wavelet_level=1, state_dim=4, heads=4)
FULL_CONFIG = dict(in_channels=4, image_size=32, patch_size=2, width=1024, depth=20, attn_every=4,
                   wavelet_level=2, state_dim=16, heads=16, label_dropout=0.15)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


def _chunks(mod: Tensor, n: int) -> list[Tensor]:
    b = mod.shape[0]
    return [T.reshape(m, (b, 1, m.shape[-1])) for m in T.split(mod, n, axis=-1)]


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; (batch,) -> (batch, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=-1)
    return emb


class ConditionEmbedding(Module):
    """Time MLP plus a class table whose last row is the null / unconditional token."""

    def __init__(self, cfg: ModelConfig, gen, dtype=np.float32):
        self.freq_dim = cfg.time_freq_dim
        self.num_classes = cfg.num_classes
        self.t1 = Linear(cfg.time_freq_dim, cfg.width, gen, dtype=dtype)
        self.t2 = Linear(cfg.width, cfg.width, gen, dtype=dtype)
        self.table = param(gen.normal(0.0, 0.02, size=(cfg.num_classes + 1, cfg.width)), dtype)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def __call__(self, t: np.ndarray, c: np.ndarray | None) -> Tensor:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        feats = Tensor(timestep_embedding(t, self.freq_dim).astype(self.t1.weight.dtype))
        temb = self.t2(T.silu(self.t1(feats)))
        if c is None:
            c = np.full(t.shape[0], self.null_class, dtype=np.intp)
        c = np.asarray(c, dtype=np.intp).reshape(-1)
        if c.size and (c.min() < 0 or c.max() > self.null_class):
            raise ValueError(f"class id out of range [0, {self.num_classes}) (null={self.null_class})")
        return T.add(temb, T.gather(self.table, c, axis=0))


class DiMBlock(Module):
    """adaLN-zero residual block: spatial Mamba and wavelet Mamba fused by cross-attention."""

    def __init__(self, cfg: ModelConfig, block_index: int, gen, dtype=np.float32):
        D, g = cfg.width, cfg.grid
        self.cfg = cfg
        self.block_index = block_index
        self.ada = Linear(D, 3 * D, gen, zero=True, dtype=dtype)
        kw = dict(cond_dim=D, state_dim=cfg.state_dim, expand=cfg.expand,
                  conv_width=cfg.conv_width, dtype=dtype)
        self.spatial = DirectionalMamba(D, block_orders(cfg.scan_kind, block_index, g, g), gen, **kw)
        self.wavelet = None
        self.fusion = None
        if cfg.wavelet_level > 0:
            orders = [wavelet_window_order(cfg.wavelet_level, g, g, d) for d in ("LR", "TB")]
            self.wavelet = DirectionalMamba(D, orders, gen, **kw)
            self.fusion = Fusion(D, cfg.heads, gen, cfg.fusion, dtype=dtype)

    def wavelet_branch(self, h: Tensor, cond: Tensor) -> Tensor:
        b, L, D = h.shape
        g, lvl = self.cfg.grid, self.cfg.wavelet_level
        grid = T.transpose(T.reshape(h, (b, g, g, D)), (0, 3, 1, 2))
        stack = decompose(grid, lvl)                                  # (b, D, 4^l, s, s)
        s = g // 2 ** lvl
        seq = T.reshape(T.transpose(stack.coeffs, (0, 2, 3, 4, 1)), (b, L, D))
        out = self.wavelet(seq, cond)
        coeffs = T.transpose(T.reshape(out, (b, 4 ** lvl, s, s, D)), (0, 4, 1, 2, 3))
        back = reconstruct(WaveletStack(lvl, coeffs))                 # (b, D, g, g)
        return T.reshape(T.transpose(back, (0, 2, 3, 1)), (b, L, D))

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale, gate = _chunks(self.ada(T.silu(cond)), 3)
        h = _modulate(T.layer_norm(x), shift, scale)
        f = self.spatial(h, cond)
        if self.wavelet is not None:
            f = self.fusion(f, self.wavelet_branch(h, cond))
        return T.add(x, T.mul(gate, f))


class TransformerBlock(Module):
    """Pre-norm attention + gated MLP, both adaLN-modulated with zero-initialised gates."""

    def __init__(self, cfg: ModelConfig, gen, dtype=np.float32):
        D, hidden = cfg.width, cfg.mlp_ratio * cfg.width
        self.heads = cfg.heads
        self.ada = Linear(D, 6 * D, gen, zero=True, dtype=dtype)
        self.qkv = Linear(D, 3 * D, gen, dtype=dtype)
        self.proj = Linear(D, D, gen, dtype=dtype)
        self.up_a = Linear(D, hidden, gen, dtype=dtype)
        self.up_b = Linear(D, hidden, gen, dtype=dtype)
        self.down = Linear(hidden, D, gen, dtype=dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        s1, sc1, g1, s2, sc2, g2 = _chunks(self.ada(T.silu(cond)), 6)
        h = _modulate(T.layer_norm(x), s1, sc1)
        q, k, v = T.split(self.qkv(h), 3, axis=-1)
        x = T.add(x, T.mul(g1, self.proj(multihead_attention(q, k, v, self.heads))))
        h = _modulate(T.layer_norm(x), s2, sc2)
        mlp = self.down(T.mul(T.silu(self.up_a(h)), self.up_b(h)))
        return T.add(x, T.mul(g2, mlp))


class DiMSUM(Module):
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        gen = T.rng(cfg.seed, "init")
        C, p, D = cfg.in_channels, cfg.patch_size, cfg.width
        self.patch_embed = Linear(C * p * p, D, gen, dtype=dtype)
        self.pos_embed = param(gen.normal(0.0, 0.02, size=(cfg.num_tokens, D)), dtype)
        self.cond_embed = ConditionEmbedding(cfg, gen, dtype)
        self.blocks = [DiMBlock(cfg, i, gen, dtype) for i in range(cfg.depth)]
        if cfg.shared_transformer:
            shared = TransformerBlock(cfg, gen, dtype)
            self.transformers = [shared] * cfg.insertions
        else:
            self.transformers = [TransformerBlock(cfg, gen, dtype) for _ in range(cfg.insertions)]
        self.final_ada = Linear(D, 2 * D, gen, zero=True, dtype=dtype)
        self.head = Linear(D, C * p * p, gen, dtype=dtype)

    @property
    def dtype(self):
        return self.pos_embed.dtype

    # -- layout ---------------------------------------------------------------
    def patchify_layout(self, x: Tensor) -> Tensor:
        """(b, C, H, W) -> (b, T, p*p*C), patches in raster order, pixels (py, px, c)."""
        b, C, H, W = x.shape
        p = self.cfg.patch_size
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        g = T.reshape(x, (b, C, H // p, p, W // p, p))
        g = T.transpose(g, (0, 2, 4, 3, 5, 1))
        return T.reshape(g, (b, (H // p) * (W // p), p * p * C))

    def unpatchify_layout(self, tokens: Tensor) -> Tensor:
        b, L, _ = tokens.shape
        p, C, g = self.cfg.patch_size, self.cfg.in_channels, self.cfg.grid
        x = T.reshape(tokens, (b, g, g, p, p, C))
        x = T.transpose(x, (0, 5, 1, 3, 2, 4))
        return T.reshape(x, (b, C, g * p, g * p))

    def embed(self, x: Tensor) -> Tensor:
        return T.add(self.patch_embed(self.patchify_layout(x)), self.pos_embed)

    # -- forward --------------------------------------------------------------
    def trunk(self, tokens: Tensor, cond: Tensor) -> Tensor:
        k = self.cfg.attn_every
        for start in range(0, self.cfg.depth, k):
            tokens = dimsum_block(self, tokens, cond, start)
        return tokens

    def __call__(self, x, t, c=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected (batch, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("time must lie in [0, 1]")
        if c is not None and cfg.num_classes == 0:
            raise ValueError("unconditional model received class ids")
        cond = self.cond_embed(t, c)
        tokens = self.trunk(self.embed(x), cond)
        shift, scale = _chunks(self.final_ada(T.silu(cond)), 2)
        out = self.head(_modulate(T.layer_norm(tokens), shift, scale))
        return self.unpatchify_layout(out)


def dimsum_block(model: DiMSUM, tokens: Tensor, cond: Tensor, start_index: int) -> Tensor:
    """``attn_every`` consecutive DiM blocks followed by the (shared) transformer block."""
    k = model.cfg.attn_every
    for i in range(start_index, start_index + k):
        tokens = model.blocks[i](tokens, cond)
    return model.transformers[start_index // k](tokens, cond)


def transformer_param_count(model: DiMSUM) -> int:
    return int(sum(p.size for p in model.transformers[0].parameters()))
