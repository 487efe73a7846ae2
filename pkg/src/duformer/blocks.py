"""Encoder, enhancement, attention and decoder blocks."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .layers import Conv2d, LayerNorm, Linear, ParamStore, conv_relu, upsample_to
from .tensor import ShapeError, Tensor

BISCSE_VARIANTS = ("origin_scse", "bi_channel", "bi_spatial", "biscse")


class Stem:
    """Two parallel conv->pool paths (max and average) fused by a 1x1 conv.

    Each path uses a non-overlapping ``k x k`` stride-``k`` conv (``k`` is
    ``downsample // 2``) followed by a 2x2 stride-2 pool, so the stem needs
    no padding and maps a constant image to a constant map.
    """

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, downsample: int, rng):
        if downsample not in (2, 4):
            raise ValueError(f"stem downsample must be 2 or 4, got {downsample}")
        k = downsample // 2
        self.downsample = downsample
        self.max_conv = Conv2d(store, f"{name}.max_path", cin, cout, k, rng, stride=k, padding=0)
        self.avg_conv = Conv2d(store, f"{name}.avg_path", cin, cout, k, rng, stride=k, padding=0)
        self.fuse = Conv2d(store, f"{name}.fuse", 2 * cout, cout, 1, rng)

    def __call__(self, image: Tensor) -> Tensor:
        h, w = image.shape[2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(
                f"stem input {(h, w)} not divisible by its downsample {self.downsample}"
            )
        a = T.max_pool2d(self.max_conv(image), 2, 2)
        b = T.avg_pool2d(self.avg_conv(image), 2, 2)
        return T.relu(self.fuse(T.concat([a, b], axis=1)))


class DoubleUBlock:
    """Two stacked two-level U-nets with cross shortcuts plus a residual projection.

    U1 is a plain U-net (two stride-2 downsamplings, bilinear upsampling,
    concatenated skips).  Every level of U2 additionally concatenates the
    U1 feature at the same resolution, so U2 re-mines what U1 produced.
    Internal downsampling uses padded stride-2 convs, which round up, so
    the block also runs on 2x2 and 1x1 maps.
    """

    def __init__(self, store, name, cin, cout, rng, stride=1, mid=None):
        m = mid or cout
        self.stride = stride
        c = lambda n, i, o, s=1: Conv2d(store, f"{name}.{n}", i, o, 3, rng, stride=s)  # noqa: E731
        self.entry = c("entry", cin, cout, stride)
        self.u1_enc0 = c("u1.enc0", cout, m)
        self.u1_enc1 = c("u1.enc1", m, m, 2)
        self.u1_enc2 = c("u1.enc2", m, m, 2)
        self.u1_dec1 = c("u1.dec1", 2 * m, m)
        self.u1_dec0 = c("u1.dec0", 2 * m, m)
        self.u2_enc0 = c("u2.enc0", 2 * m, m)
        self.u2_down1 = c("u2.down1", m, m, 2)
        self.u2_enc1 = c("u2.enc1", 2 * m, m)
        self.u2_down2 = c("u2.down2", m, m, 2)
        self.u2_enc2 = c("u2.enc2", 2 * m, m)
        self.u2_dec1 = c("u2.dec1", 2 * m, m)
        self.u2_dec0 = c("u2.dec0", 2 * m, m)
        self.out = Conv2d(store, f"{name}.out", m, cout, 1, rng)
        self.residual = Conv2d(store, f"{name}.residual", cin, cout, 1, rng)

    def project_residual(self, x: Tensor) -> Tensor:
        if self.stride == 2:
            x = T.avg_pool2d(x, 2, 2)
        return self.residual(x)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if self.stride == 2 and (h % 2 or w % 2):
            raise ShapeError(f"DUB with stride 2 needs even extents, got {(h, w)}")
        e = conv_relu(self.entry, x)
        a0 = conv_relu(self.u1_enc0, e)
        a1 = conv_relu(self.u1_enc1, a0)
        a2 = conv_relu(self.u1_enc2, a1)
        b1 = conv_relu(self.u1_dec1, T.concat([upsample_to(a2, a1), a1], axis=1))
        b0 = conv_relu(self.u1_dec0, T.concat([upsample_to(b1, a0), a0], axis=1))

        c0 = conv_relu(self.u2_enc0, T.concat([b0, a0], axis=1))
        c1 = conv_relu(self.u2_enc1, T.concat([conv_relu(self.u2_down1, c0), b1], axis=1))
        c2 = conv_relu(self.u2_enc2, T.concat([conv_relu(self.u2_down2, c1), a2], axis=1))
        f1 = conv_relu(self.u2_dec1, T.concat([upsample_to(c2, c1), c1], axis=1))
        f0 = conv_relu(self.u2_dec0, T.concat([upsample_to(f1, c0), c0], axis=1))
        return self.out(f0) + self.project_residual(x)


class LightStage:
    """Single conv standing in for a DUB in the light-encoder baseline."""

    def __init__(self, store, name, cin, cout, rng, stride=1):
        self.stride = stride
        self.conv = Conv2d(store, f"{name}.conv", cin, cout, 3, rng, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_relu(self.conv, x)


class Transition:
    """Parallel 3x3 convs at dilations 1, 2, 3, summed then rectified."""

    def __init__(self, store, name, cin, cout, rng, dilations=(1, 2, 3)):
        self.convs = [
            Conv2d(store, f"{name}.dil{d}", cin, cout, 3, rng, dilation=d, bias=(i == 0))
            for i, d in enumerate(dilations)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        out = self.convs[0](x)
        for conv in self.convs[1:]:
            out = out + conv(x)
        return T.relu(out)


class PLAB:
    """Power-line aware block.

    Branches: horizontal ``1 x k`` and vertical ``k x 1`` dilated convs, a
    plain ``k x k`` conv and a 1x1 conv.  Their rectified outputs are
    concatenated and mixed back to ``C`` channels by a 1x1 conv.
    """

    def __init__(self, store, name, channels, rng, k=3, dilation=2):
        c = channels
        self.horizontal = Conv2d(store, f"{name}.horizontal", c, c, (1, k), rng, dilation=(1, dilation))
        self.vertical = Conv2d(store, f"{name}.vertical", c, c, (k, 1), rng, dilation=(dilation, 1))
        self.square = Conv2d(store, f"{name}.square", c, c, k, rng)
        self.point = Conv2d(store, f"{name}.point", c, c, 1, rng)
        self.fuse = Conv2d(store, f"{name}.fuse", 4 * c, c, 1, rng)

    def branches(self, x: Tensor) -> list[Tensor]:
        return [conv_relu(b, x) for b in (self.horizontal, self.vertical, self.square, self.point)]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fuse(T.concat(self.branches(x), axis=1))


class BiscSE:
    """Concurrent channel and spatial squeeze-excitation, combined by elementwise max.

    ``variant`` picks the channel pooling (max for ``bi_channel`` and
    ``biscse``, average otherwise) and the spatial squeeze (a 1x1 conv, or
    summed 1x1/3x3/5x5 convs for ``bi_spatial`` and ``biscse``).
    """

    def __init__(self, store, name, channels, rng, variant="biscse", reduction=2):
        if variant not in BISCSE_VARIANTS:
            raise ValueError(f"unknown BiscSE variant {variant!r}; expected one of {BISCSE_VARIANTS}")
        if channels < 2:
            raise ValueError("BiscSE needs at least 2 channels")
        self.variant = variant
        hidden = max(channels // reduction, 1)
        self.squeeze = Conv2d(store, f"{name}.channel.squeeze", channels, hidden, 1, rng)
        self.excite = Conv2d(store, f"{name}.channel.excite", hidden, channels, 1, rng)
        kernels = (1, 3, 5) if variant in ("bi_spatial", "biscse") else (1,)
        self.spatial = [
            Conv2d(store, f"{name}.spatial.k{k}", channels, 1, k, rng, bias=(i == 0))
            for i, k in enumerate(kernels)
        ]

    def channel_gate(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if self.variant in ("bi_channel", "biscse"):
            pooled = T.max_pool2d(x, (h, w), (h, w))
        else:
            pooled = T.adaptive_avg_pool2d(x, (1, 1))
        return T.sigmoid(self.excite(conv_relu(self.squeeze, pooled)))

    def spatial_gate(self, x: Tensor) -> Tensor:
        s = self.spatial[0](x)
        for conv in self.spatial[1:]:
            s = s + conv(x)
        return T.sigmoid(s)

    def __call__(self, x: Tensor) -> Tensor:
        return T.maximum(x * self.channel_gate(x), x * self.spatial_gate(x))


def fuse_stage(dub_out: Tensor, enhanced: Tensor) -> Tensor:
    """Stage output = DUB output times its enhancement branch, elementwise."""
    if dub_out.shape != enhanced.shape:
        raise ShapeError(f"fusion operands differ: {dub_out.shape} vs {enhanced.shape}")
    return dub_out * enhanced


def tokenize(stage_outputs, grid) -> Tensor:
    """Pool every stage to ``grid``, concatenate channels, flatten to [N, T, D]."""
    ht, wt = grid
    pooled = []
    for i, s in enumerate(stage_outputs, start=1):
        h, w = s.shape[2:]
        if ht > h or wt > w:
            raise ShapeError(f"token grid {(ht, wt)} exceeds stage {i} extent {(h, w)}")
        pooled.append(T.adaptive_avg_pool2d(s, (ht, wt)))
    x = T.concat(pooled, axis=1)
    n, d = x.shape[:2]
    return x.reshape(n, d, ht * wt).transpose(0, 2, 1)


def attention_head(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` with the softmax over each score row."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    dk = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(dk))
    return T.matmul(T.softmax_rows(scores), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention:
    def __init__(self, store, name, dim, num_heads, head_dim, rng, zero_out=True):
        if num_heads * head_dim != dim:
            raise ValueError(f"{num_heads} heads x {head_dim} != embedding width {dim}")
        self.num_heads, self.head_dim = num_heads, head_dim
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.out = Linear(store, f"{name}.out", dim, dim, rng, zero_init=zero_out)

    def _heads(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return x.reshape(n, t, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        if d != self.num_heads * self.head_dim:
            raise ShapeError(f"attention input width {d} != {self.num_heads}x{self.head_dim}")
        heads = attention_head(self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x)))
        merged = heads.transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.out(merged)


class TransformerBlock:
    """Pre-norm residual block: attention then a two-layer ReLU MLP."""

    def __init__(self, store, name, dim, num_heads, head_dim, ffn_expansion, rng):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, num_heads, head_dim, rng)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.ffn_in = Linear(store, f"{name}.ffn_in", dim, dim * ffn_expansion, rng)
        self.ffn_out = Linear(store, f"{name}.ffn_out", dim * ffn_expansion, dim, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn_out(T.relu(self.ffn_in(self.norm2(x))))


class StageDecoder:
    """Per-stage decode: token slice x enhancement, concat DUB output, conv, classify."""

    def __init__(self, store, stage, channels, num_classes, rng):
        self.conv = Conv2d(store, f"decoder.stage{stage}.conv", 2 * channels, channels, 3, rng)
        self.classify = Conv2d(store, f"head.stage{stage}.classify", channels, num_classes, 1, rng)

    def __call__(self, tokens: Tensor, enhanced: Tensor, dub_out: Tensor) -> Tensor:
        up = upsample_to(tokens, dub_out)
        x = T.concat([up * enhanced, dub_out], axis=1)
        return self.classify(conv_relu(self.conv, x))
