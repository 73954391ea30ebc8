"""Spatial/wavelet feature fusion: swapped-query cross-attention and ablation variants."""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import ShapeError, Tensor


class FusionVariant(enum.Enum):
    SWAP_Q = "swapq"
    SWAP_K = "swapk"
    PLAIN_ATTENTION = "attention"
    LINEAR_CONCAT = "linear"

    @classmethod
    def parse(cls, value) -> "FusionVariant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {"plainattention": "attention", "linearconcat": "linear", "concat": "linear"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown fusion variant {value!r}; expected one of {names}") from None


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, L, d = x.shape
    return T.transpose(T.reshape(x, (b, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, L, h * dh))


def attention_weights(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """Per-head row-stochastic matrices, (batch, heads, Lq, Lk)."""
    d = q.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)))
    return T.softmax(T.mul(scores, 1.0 / np.sqrt(d // heads)))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Full (unmasked) scaled dot-product attention; inputs are (batch, L, D)."""
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} do not conform")
    att = attention_weights(q, k, heads)
    return _merge_heads(T.matmul(att, _split_heads(v, heads)))


class Fusion(Module):
    def __init__(self, width: int, heads: int, gen: np.random.Generator,
                 variant: FusionVariant | str = FusionVariant.SWAP_Q, dtype=np.float32):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.variant = FusionVariant.parse(variant)
        if self.variant is not FusionVariant.LINEAR_CONCAT:
            self.qkv_s = Linear(width, 3 * width, gen, dtype=dtype)
            self.qkv_w = Linear(width, 3 * width, gen, dtype=dtype)
        self.out = Linear(2 * width, width, gen, dtype=dtype)

    def __call__(self, f_s: Tensor, f_w: Tensor) -> Tensor:
        return fuse(f_s, f_w, self)


def fuse(f_s: Tensor, f_w: Tensor, params: Fusion) -> Tensor:
    if f_s.shape != f_w.shape:
        raise ShapeError(f"spatial {f_s.shape} and wavelet {f_w.shape} features differ")
    variant, h = params.variant, params.heads
    if variant is FusionVariant.LINEAR_CONCAT:
        return params.out(T.concat([f_s, f_w], axis=-1))
    q_s, k_s, v_s = T.split(params.qkv_s(f_s), 3, axis=-1)
    q_w, k_w, v_w = T.split(params.qkv_w(f_w), 3, axis=-1)
    if variant is FusionVariant.SWAP_Q:
        a, b = multihead_attention(q_s, k_w, v_w, h), multihead_attention(q_w, k_s, v_s, h)
    elif variant is FusionVariant.SWAP_K:
        a, b = multihead_attention(q_w, k_s, v_w, h), multihead_attention(q_s, k_w, v_s, h)
    else:
        # self-attention over the channel-concatenated pair
        q = T.concat([q_s, q_w], axis=-1)
        k = T.concat([k_s, k_w], axis=-1)
        v = T.concat([v_s, v_w], axis=-1)
        return params.out(multihead_attention(q, k, v, h))
    return params.out(T.concat([a, b], axis=-1))
