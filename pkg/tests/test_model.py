import numpy as np
import pytest

from dimsum import tensor as T
from dimsum.flow import Schedule, fm_loss
from dimsum.model import (DESK_CONFIG, FULL_CONFIG, DiMSUM, ModelConfig, TransformerBlock,
                          dimsum_block, timestep_embedding, transformer_param_count)
from dimsum.tensor import ShapeError, Tensor

TINY = dict(in_channels=2, image_size=8, patch_size=2, width=8, depth=4, attn_every=2,
            wavelet_level=1, heads=2, state_dim=2, time_freq_dim=8)


def tiny(dtype=np.float64, **kw):
    return DiMSUM(ModelConfig(**{**TINY, **kw}), dtype=dtype)


def jitter(model, scale=0.1, seed=0):
    g = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += scale * g.standard_normal(p.shape)
    return model


def test_patch_token_counts():
    assert ModelConfig(image_size=8, patch_size=2).num_tokens == 16
    assert ModelConfig(**{**FULL_CONFIG, "width": 64, "heads": 4}).num_tokens == 256


def test_patchify_roundtrip():
    m = tiny()
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2, 8, 8)))
    tokens = m.patchify_layout(x)
    assert tokens.shape == (3, 16, 8)
    np.testing.assert_array_equal(m.unpatchify_layout(tokens).data, x.data)


def test_config_validation():
    with pytest.raises(ShapeError):
        ModelConfig(image_size=9, patch_size=2)
    with pytest.raises(ValueError):
        ModelConfig(depth=6, attn_every=4)
    with pytest.raises(ShapeError):
        ModelConfig(image_size=8, patch_size=2, wavelet_level=2)
    with pytest.raises(ValueError):
        ModelConfig(scan_kind="spiral")


def test_identity_at_init_block_and_trunk():
    m = tiny()
    tokens = Tensor(np.random.default_rng(0).standard_normal((2, 16, 8)))
    cond = m.cond_embed(np.array([0.3, 0.7]), None)
    for blk in m.blocks:
        np.testing.assert_array_equal(blk(tokens, cond).data, tokens.data)
    np.testing.assert_array_equal(m.trunk(tokens, cond).data, tokens.data)


def test_level0_block_is_spatial_only():
    m = jitter(tiny(wavelet_level=0))
    blk = m.blocks[0]
    assert blk.wavelet is None and blk.fusion is None
    x = Tensor(np.random.default_rng(0).standard_normal((1, 16, 8)))
    cond = m.cond_embed(np.array([0.5]), None)
    shift, scale, gate = (T.reshape(c, (1, 1, 8)) for c in T.split(blk.ada(T.silu(cond)), 3))
    h = T.add(T.mul(T.layer_norm(x), T.add(scale, 1.0)), shift)
    expect = T.add(x, T.mul(gate, blk.spatial(h, cond)))
    np.testing.assert_allclose(blk(x, cond).data, expect.data, atol=1e-14)


def test_blocks_cycle_sweep4_directions():
    m = DiMSUM(ModelConfig(**{**TINY, "depth": 4, "attn_every": 4}))
    assert [b.spatial.orders[0].direction_index for b in m.blocks] == [0, 1, 2, 3]
    assert all(len(b.wavelet.orders) == 2 for b in m.blocks)


def test_wavelet_branch_uses_lr_and_tb():
    m = tiny()
    assert [o.direction_index for o in m.blocks[0].wavelet.orders] == [0, 1]


def test_shared_transformer_applied_per_insertion():
    m = tiny(depth=8, attn_every=4)
    calls = []
    shared = m.transformers[0]
    orig = TransformerBlock.__call__
    try:
        TransformerBlock.__call__ = lambda self, x, c: (calls.append(id(self)), orig(self, x, c))[1]
        m(np.zeros((1, 2, 8, 8)), 0.5)
    finally:
        TransformerBlock.__call__ = orig
    assert calls == [id(shared), id(shared)]


def test_weight_sharing_observable():
    m = tiny()
    jitter(m)
    tokens = Tensor(np.random.default_rng(1).standard_normal((1, 16, 8)))
    cond = m.cond_embed(np.array([0.5]), None)
    before = [m.transformers[i](tokens, cond).data for i in range(2)]
    m.transformers[0].down.weight.data += 0.5
    after = [m.transformers[i](tokens, cond).data for i in range(2)]
    assert all(np.abs(a - b).max() > 1e-6 for a, b in zip(before, after))


def test_independent_variant_distinct_params():
    m = tiny(shared_transformer=False)
    ids = [{id(p) for p in t.parameters()} for t in m.transformers]
    assert not ids[0] & ids[1]


@pytest.mark.parametrize("depth,k", [(4, 2), (8, 4), (8, 2)])
def test_parameter_accounting(depth, k):
    shared = tiny(depth=depth, attn_every=k)
    indep = tiny(depth=depth, attn_every=k, shared_transformer=False)
    blk = transformer_param_count(shared)
    assert shared.num_parameters() + (shared.cfg.insertions - 1) * blk == indep.num_parameters()


def test_forward_shape_and_determinism():
    m = tiny(num_classes=3)
    x = np.random.default_rng(0).standard_normal((2, 2, 8, 8))
    a = m(x, np.array([0.1, 0.9]), np.array([0, 2])).data
    b = m(x, np.array([0.1, 0.9]), np.array([0, 2])).data
    assert a.shape == x.shape and np.isfinite(a).all()
    assert np.array_equal(a, b)


def test_forward_errors():
    m = tiny()
    with pytest.raises(ShapeError):
        m(np.zeros((1, 3, 8, 8)), 0.5)
    with pytest.raises(ValueError):
        m(np.zeros((1, 2, 8, 8)), 1.5)
    with pytest.raises(ValueError):
        m(np.zeros((1, 2, 8, 8)), 0.5, np.array([0]))
    mc = tiny(num_classes=2)
    with pytest.raises(ValueError):
        mc(np.zeros((1, 2, 8, 8)), 0.5, np.array([5]))


def test_null_class_is_unconditional_token():
    m = tiny(num_classes=3)
    assert m.cond_embed.null_class == 3
    t = np.array([0.4])
    np.testing.assert_array_equal(m.cond_embed(t, None).data, m.cond_embed(t, np.array([3])).data)


def test_timestep_embedding_shape():
    e = timestep_embedding(np.array([0.0, 0.5]), 9)
    assert e.shape == (2, 9)
    np.testing.assert_array_equal(e[0, :4], 1.0)


@pytest.mark.parametrize("scan_kind", ["bi", "sweep8", "zigzag8", "jpeg8", "window"])
def test_every_scan_kind_runs(scan_kind):
    m = tiny(scan_kind=scan_kind, depth=2, attn_every=2)
    assert m(np.zeros((1, 2, 8, 8)), 0.5).shape == (1, 2, 8, 8)


def test_end_to_end_gradient():
    cfg = dict(in_channels=1, image_size=8, patch_size=2, width=8, depth=4, attn_every=4,
               wavelet_level=1, heads=2, state_dim=2, time_freq_dim=8, num_classes=2)
    m = jitter(DiMSUM(ModelConfig(**cfg), dtype=np.float64), scale=0.05)
    g = np.random.default_rng(3)
    x = g.standard_normal((2, 1, 8, 8))
    t, eps, c = g.random(2), g.standard_normal(x.shape), np.array([0, 1])
    f = lambda: fm_loss(m, x, c, Schedule(), None, t=t, eps=eps)
    assert T.finite_diff_check(f, m.parameters(), eps=1e-6, max_coords=6) <= 1e-4


def test_desk_config_defaults():
    cfg = ModelConfig(**DESK_CONFIG)
    assert (cfg.width, cfg.depth, cfg.patch_size, cfg.wavelet_level, cfg.state_dim, cfg.heads) == (64, 4, 2, 1, 4, 4)
    assert FULL_CONFIG["depth"] == 20 and FULL_CONFIG["width"] == 1024
