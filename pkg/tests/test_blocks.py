import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duformer import gradcheck as gc
from duformer import tensor as T
from duformer.blocks import (
    BISCSE_VARIANTS,
    PLAB,
    BiscSE,
    DoubleUBlock,
    MultiHeadAttention,
    Stem,
    Transition,
    TransformerBlock,
    attention_head,
    fuse_stage,
    tokenize,
)
from duformer.layers import Conv2d, ParamStore, conv_relu
from duformer.tensor import ShapeError, Tensor

F64 = np.float64


def store():
    return ParamStore(F64)


def rng(seed=0):
    return np.random.default_rng(seed)


def x64(a):
    return Tensor(np.asarray(a, dtype=F64))


def randn(*shape, seed=0):
    return x64(np.random.default_rng(seed).standard_normal(shape))


# -- stem -----------------------------------------------------------------------


def test_stem_shape():
    s = Stem(store(), "token_encoder.stem", 3, 8, 4, rng())
    assert s(randn(1, 3, 64, 64)).shape == (1, 8, 16, 16)


def test_stem_constant_image_gives_constant_map():
    s = Stem(store(), "token_encoder.stem", 3, 8, 4, rng())
    y = s(x64(np.full((1, 3, 16, 16), 0.7))).data
    np.testing.assert_allclose(y, y[:, :, :1, :1] * np.ones_like(y), atol=1e-12)


def test_stem_rejects_indivisible_input():
    s = Stem(store(), "token_encoder.stem", 3, 8, 4, rng())
    with pytest.raises(ShapeError):
        s(randn(1, 3, 18, 16))


# -- double U block -------------------------------------------------------------------


def test_dub_strided_shape():
    d = DoubleUBlock(store(), "token_encoder.dub", 4, 6, rng(), stride=2)
    assert d(randn(1, 4, 16, 16)).shape == (1, 6, 8, 8)


@pytest.mark.parametrize("hw", [(8, 8), (6, 10), (2, 2), (1, 1)])
def test_dub_preserves_extent(hw):
    d = DoubleUBlock(store(), "token_encoder.dub", 3, 5, rng(), mid=2)
    assert d(randn(2, 3, *hw)).shape == (2, 5, *hw)


@pytest.mark.parametrize("stride", [1, 2])
def test_dub_zero_internal_weights_leave_residual(stride):
    st = store()
    d = DoubleUBlock(st, "token_encoder.dub", 4, 6, rng(), stride=stride)
    for name, p in st.items():
        if ".residual." not in name:
            p.data = np.zeros_like(p.data)
    x = randn(1, 4, 8, 8, seed=3)
    np.testing.assert_array_equal(d(x).data, d.project_residual(x).data)


def test_dub_u2_sees_u1_features():
    """Zeroing U1's decoder changes the output only through the cross shortcuts into U2."""
    st = store()
    d = DoubleUBlock(st, "token_encoder.dub", 3, 4, rng(), mid=3)
    x = randn(1, 3, 8, 8, seed=1)
    before = d(x).data
    st["token_encoder.dub.u1.dec0.weight"].data[:] = 0
    assert not np.allclose(d(x).data, before)


# -- transition -------------------------------------------------------------------


def test_transition_shape_and_interior_constant():
    t = Transition(store(), "token_encoder.transition", 4, 6, rng())
    y = t(x64(np.full((1, 4, 12, 12), 1.3))).data
    assert y.shape == (1, 6, 12, 12)
    interior = y[:, :, 3:-3, 3:-3]
    np.testing.assert_allclose(interior, interior[:, :, :1, :1] * np.ones_like(interior), atol=1e-12)


# -- PLAB -----------------------------------------------------------------------


def _line(c, h, w, row=None, col=None):
    x = np.zeros((1, c, h, w))
    if row is not None:
        x[:, :, row, :] = 1.0
    if col is not None:
        x[:, :, :, col] = 1.0
    return x


def _direct_conv(x, w, b, dil):
    """Same-padded correlation, one output cell at a time."""
    _, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ph, pw = dil[0] * (kh - 1) // 2, dil[1] * (kw - 1) // 2
    out = np.zeros((1, co, h, wd))
    for o in range(co):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for a in range(kh):
                    for bb in range(kw):
                        r, q = i + a * dil[0] - ph, j + bb * dil[1] - pw
                        if 0 <= r < h and 0 <= q < wd:
                            acc += w[o, :, a, bb] @ x[0, :, r, q]
                out[0, o, i, j] = acc
    return out


def test_plab_shape():
    p = PLAB(store(), "token_encoder.plab", 5, rng())
    assert p(randn(2, 5, 9, 7)).shape == (2, 5, 9, 7)


def test_plab_horizontal_branch_follows_line():
    st = store()
    p = PLAB(st, "token_encoder.plab", 3, rng(2))
    st["token_encoder.plab.horizontal.weight"].data = np.abs(st["token_encoder.plab.horizontal.weight"].data)
    x = _line(3, 9, 11, row=4)
    pre = p.horizontal(x64(x)).data
    expected = _direct_conv(x, p.horizontal.weight.data, p.horizontal.bias.data, (1, 2))
    np.testing.assert_allclose(pre, expected, atol=1e-12)
    # positive taps: every pixel on the line responds, and only the line row does
    assert np.all(pre[0, :, 4, :] > 0)
    off_line = np.delete(pre[0], 4, axis=1)
    np.testing.assert_array_equal(off_line, 0.0)


def test_plab_vertical_branch_reaches_dilated_taps():
    st = store()
    p = PLAB(st, "token_encoder.plab", 2, rng(4))
    x = _line(2, 9, 9, row=4)
    pre = p.vertical(x64(x)).data
    expected = _direct_conv(x, p.vertical.weight.data, p.vertical.bias.data, (2, 1))
    np.testing.assert_allclose(pre, expected, atol=1e-12)
    hit_rows = {r for r in range(9) if np.any(pre[0, :, r, :] != 0)}
    assert hit_rows == {2, 4, 6}


def _plain_block(st, c, r):
    a = Conv2d(st, "token_encoder.plain.a", c, c, 3, r)
    b = Conv2d(st, "token_encoder.plain.b", c, c, 3, r)
    out = Conv2d(st, "token_encoder.plain.out", c, c, 1, r)
    return lambda x: out(conv_relu(b, conv_relu(a, x)))


def test_plab_stronger_on_thin_lines_than_plain_block():
    c = 16
    plab_resp, plain_resp = [], []
    for seed in range(20):
        probes = [x64(_line(c, 32, 32, row=16)), x64(_line(c, 32, 32, col=16))]
        s1, s2 = store(), store()
        plab = PLAB(s1, "token_encoder.plab", c, rng(seed))
        plain = _plain_block(s2, c, rng(seed))
        n1, n2 = sum(p.size for p in s1.values()), sum(p.size for p in s2.values())
        assert abs(n1 - n2) / n1 < 0.1  # parameter-matched within 10 %
        plab_resp.append(np.mean([np.abs(plab(x).data).mean() for x in probes]))
        plain_resp.append(np.mean([np.abs(plain(x).data).mean() for x in probes]))
    assert np.mean(plab_resp) > np.mean(plain_resp)


# -- BiscSE ---------------------------------------------------------------------


def _spike(c=4, h=8, w=8):
    x = np.full((1, c, h, w), 0.1)
    x[0, 1, 3, 5] = 25.0
    return x64(x)


@pytest.mark.parametrize("variant", BISCSE_VARIANTS)
def test_biscse_zero_input(variant):
    b = BiscSE(store(), "token_encoder.biscse", 4, rng(), variant)
    np.testing.assert_array_equal(b(x64(np.zeros((1, 4, 6, 6)))).data, 0.0)


def test_biscse_spike_separates_channel_pooling():
    x = _spike()
    a = BiscSE(store(), "token_encoder.biscse", 4, rng(1), "origin_scse")
    b = BiscSE(store(), "token_encoder.biscse", 4, rng(1), "bi_channel")
    assert not np.allclose(a.channel_gate(x).data, b.channel_gate(x).data)
    assert not np.allclose(a(x).data, b(x).data)


def test_biscse_variants_pairwise_distinct_on_spike():
    x = _spike()
    outs = {v: BiscSE(store(), "token_encoder.biscse", 4, rng(1), v)(x).data for v in BISCSE_VARIANTS}
    for i, u in enumerate(BISCSE_VARIANTS):
        for v in BISCSE_VARIANTS[i + 1 :]:
            assert np.max(np.abs(outs[u] - outs[v])) > 1e-6, (u, v)


def test_biscse_rejects_unknown_variant_and_single_channel():
    with pytest.raises(ValueError, match="variant"):
        BiscSE(store(), "token_encoder.biscse", 4, rng(), "bogus")
    with pytest.raises(ValueError):
        BiscSE(store(), "token_encoder.biscse", 1, rng())


def test_biscse_is_max_of_gated_maps():
    x = randn(1, 4, 5, 5, seed=7)
    b = BiscSE(store(), "token_encoder.biscse", 4, rng(), "biscse")
    expected = np.maximum(x.data * b.channel_gate(x).data, x.data * b.spatial_gate(x).data)
    np.testing.assert_array_equal(b(x).data, expected)


@pytest.mark.parametrize("variant", BISCSE_VARIANTS)
def test_biscse_gradcheck(variant):
    assert gc.check(gc.TARGETS[f"biscse_{variant}"]).passed


# -- fusion and tokens ------------------------------------------------------------------


def test_fusion_identities():
    d = randn(2, 3, 4, 4)
    assert fuse_stage(d, x64(np.ones((2, 3, 4, 4)))).data.tobytes() == d.data.tobytes()
    np.testing.assert_array_equal(fuse_stage(d, x64(np.zeros((2, 3, 4, 4)))).data, 0.0)
    with pytest.raises(ShapeError):
        fuse_stage(d, x64(np.ones((2, 3, 4, 5))))


def test_tokenize_dims_and_constants():
    chans, extents = (2, 3, 4, 5, 6), (16, 8, 4, 4, 2)
    outs = [x64(np.full((1, c, e, e), float(i + 1))) for i, (c, e) in enumerate(zip(chans, extents))]
    tok = tokenize(outs, (2, 2))
    assert tok.shape == (1, 4, sum(chans))
    expected = np.concatenate([np.full(c, float(i + 1)) for i, c in enumerate(chans)])
    for t in range(4):
        np.testing.assert_array_equal(tok.data[0, t], expected)


def test_tokenize_bins_match_adaptive_pool():
    a, b = randn(1, 2, 7, 5, seed=1), randn(1, 3, 3, 3, seed=2)
    tok = tokenize([a, b], (2, 3)).data
    pa = T.adaptive_avg_pool2d(a, (2, 3)).data.reshape(1, 2, 6).transpose(0, 2, 1)
    pb = T.adaptive_avg_pool2d(b, (2, 3)).data.reshape(1, 3, 6).transpose(0, 2, 1)
    np.testing.assert_array_equal(tok, np.concatenate([pa, pb], axis=2))


def test_tokenize_rejects_grid_larger_than_stage():
    with pytest.raises(ShapeError):
        tokenize([randn(1, 2, 4, 4), randn(1, 2, 1, 1)], (2, 2))


# -- attention --------------------------------------------------------------------


def test_attention_single_token_returns_value():
    v = randn(1, 1, 3)
    np.testing.assert_allclose(attention_head(randn(1, 1, 4), randn(1, 1, 4, seed=1), v).data, v.data)


def test_attention_identical_keys_average_values():
    k = x64(np.tile([[0.3, -1.0, 2.0]], (4, 1))[None])
    v = randn(1, 4, 2)
    out = attention_head(randn(1, 3, 3), k, v).data
    np.testing.assert_allclose(out, np.broadcast_to(v.data.mean(axis=1, keepdims=True), out.shape), atol=1e-12)


def test_attention_two_tokens_scalar_oracle():
    q = [[1.0, 0.0], [0.0, 2.0]]
    k = [[1.0, 1.0], [2.0, -1.0]]
    v = [[1.0, 10.0], [3.0, -2.0]]
    out = attention_head(x64([q]), x64([k]), x64([v])).data[0]
    for i in range(2):
        s = [sum(q[i][d] * k[j][d] for d in range(2)) / math.sqrt(2) for j in range(2)]
        e = [math.exp(si - max(s)) for si in s]
        wts = [ei / sum(e) for ei in e]
        for d in range(2):
            assert out[i, d] == pytest.approx(wts[0] * v[0][d] + wts[1] * v[1][d], abs=1e-12)


def test_attention_rows_are_distributions():
    q, k = randn(2, 5, 4, seed=1), randn(2, 6, 4, seed=2)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))).data / 2.0
    p = T.softmax_rows(x64(scores)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_rejects_mismatch():
    with pytest.raises(ShapeError):
        attention_head(randn(1, 2, 3), randn(1, 2, 4), randn(1, 2, 4))
    with pytest.raises(ShapeError):
        attention_head(randn(1, 2, 3), randn(1, 3, 3), randn(1, 2, 3))


def test_mha_shape_and_single_head_reduction():
    st = store()
    m = MultiHeadAttention(st, "transformer.attn", 6, 1, 6, rng(), zero_out=False)
    x = randn(2, 4, 6, seed=5)
    out = m(x)
    assert out.shape == x.shape
    ref = m.out(attention_head(m.q(x), m.k(x), m.v(x)))
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_mha_rejects_bad_partition():
    with pytest.raises(ValueError):
        MultiHeadAttention(store(), "transformer.attn", 8, 3, 3, rng())


def test_mha_key_bias_gradient_is_zero():
    st = store()
    m = MultiHeadAttention(st, "transformer.attn", 6, 2, 3, rng(), zero_out=False)
    x = randn(1, 4, 6, seed=2)
    r = np.random.default_rng(3).standard_normal((1, 4, 6))
    T.tsum(m(x) * Tensor(r)).backward()
    assert gc.softmax_invariant("transformer.attn.k.bias")
    np.testing.assert_allclose(st["transformer.attn.k.bias"].grad, 0.0, atol=1e-12)
    assert np.abs(st["transformer.attn.q.bias"].grad).max() > 1e-6


def test_transformer_block_zero_init_is_identity():
    t = TransformerBlock(store(), "transformer.block0", 8, 2, 4, 2, rng())
    x = randn(2, 5, 8)
    out = t(x)
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("name", [t.name for t in gc.BLOCK_TARGETS])
def test_block_gradcheck(name):
    r = gc.check(gc.TARGETS[name])
    assert r.passed, f"{name}: {r.max_rel_error:.2e}"


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(2, 5),
    st.integers(2, 5),
    st.integers(1, 5).map(lambda k: 2 * k),
    st.integers(1, 5).map(lambda k: 2 * k),
    st.integers(0, 1000),
)
def test_blocks_follow_shape_formulas(n, cin, cout, h, w, seed):
    r = rng(seed)
    x = randn(n, cin, h, w, seed=seed)
    assert DoubleUBlock(store(), "token_encoder.d1", cin, cout, r)(x).shape == (n, cout, h, w)
    assert DoubleUBlock(store(), "token_encoder.d2", cin, cout, r, stride=2)(x).shape == (n, cout, h // 2, w // 2)
    assert Transition(store(), "token_encoder.t", cin, cout, r)(x).shape == (n, cout, h, w)
    assert PLAB(store(), "token_encoder.p", cin, r)(x).shape == x.shape
    for v in BISCSE_VARIANTS:
        assert BiscSE(store(), "token_encoder.b", cin, r, v)(x).shape == x.shape
    assert Stem(store(), "token_encoder.s", cin, cout, 2, r)(x).shape == (n, cout, h // 2, w // 2)
