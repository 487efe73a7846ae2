"""Full DUFormer assembly, configuration and parameter accounting."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import (
    BISCSE_VARIANTS,
    PLAB,
    BiscSE,
    DoubleUBlock,
    LightStage,
    StageDecoder,
    Stem,
    Transition,
    TransformerBlock,
    fuse_stage,
    tokenize,
)
from .layers import Conv2d, Linear, ParamStore, upsample_to
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    num_classes: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    stem_downsample: int = 4
    stage_downsamples: tuple[int, ...] = (4, 8, 16, 32, 64)
    plab_stages: frozenset = frozenset({1, 2, 3})
    biscse_stages: frozenset = frozenset({4, 5})
    biscse_variant: str = "biscse"
    # None pools tokens to the coarsest stage extent (input / last downsample)
    token_grid: Optional[tuple[int, int]] = None
    transformer_depth: int = 2
    num_heads: int = 4
    head_dim: int = 16
    ffn_expansion: int = 2
    heavy_encoder: bool = True
    dub_mid_ratio: float = 0.5

    def __post_init__(self):
        for name in ("stage_channels", "stage_downsamples"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("plab_stages", "biscse_stages"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))
        if self.token_grid is not None:
            object.__setattr__(self, "token_grid", tuple(int(v) for v in self.token_grid))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 5 or len(self.stage_downsamples) != 5:
            raise ValueError("stage_channels and stage_downsamples need exactly 5 entries")
        stages = set(range(1, 6))
        if not self.plab_stages <= stages or not self.biscse_stages <= stages:
            raise ValueError("plab_stages and biscse_stages must be subsets of {1..5}")
        if self.plab_stages & self.biscse_stages:
            raise ValueError("plab_stages and biscse_stages overlap")
        if self.biscse_variant not in BISCSE_VARIANTS:
            raise ValueError(f"unknown biscse_variant {self.biscse_variant!r}")
        prev = self.stem_downsample
        for d in self.stage_downsamples:
            if d not in (prev, 2 * prev):
                raise ValueError(
                    f"stage downsamples must grow by x1 or x2 per stage from the stem, got {self.stage_downsamples}"
                )
            prev = d
        if min(self.stage_channels) < 2:
            raise ValueError("every stage needs at least 2 channels")

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def token_dim(self) -> int:
        return sum(self.stage_channels)

    @property
    def max_downsample(self) -> int:
        return self.stage_downsamples[-1]

    def grid_for(self, h: int, w: int) -> tuple[int, int]:
        if self.token_grid is not None:
            return self.token_grid
        return h // self.max_downsample, w // self.max_downsample

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["plab_stages"] = sorted(self.plab_stages)
        d["biscse_stages"] = sorted(self.biscse_stages)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_downsamples"] = list(self.stage_downsamples)
        d["token_grid"] = list(self.token_grid) if self.token_grid is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **changes) -> "ModelConfig":
        """Small config for CPU training and full-model gradient checks."""
        base = dict(
            stage_channels=(16, 16, 32, 32, 32),
            stem_downsample=2,
            stage_downsamples=(2, 2, 4, 4, 8),
            transformer_depth=1,
            num_heads=2,
            head_dim=16,
            ffn_expansion=2,
        )
        base.update(changes)
        return cls(**base)


@dataclass
class EncoderState:
    """Per-stage encoder tensors cached for the decoder."""

    input_hw: tuple[int, int]
    dub_outputs: list[Tensor]
    enhanced: list[Tensor]
    stage_outputs: list[Tensor]


@dataclass
class ForwardOutputs:
    stage_logits: list[Tensor]
    fused_logits: Tensor
    stage_features: list[Tensor] = field(default_factory=list)

    @property
    def all_logits(self) -> list[Tensor]:
        return [*self.stage_logits, self.fused_logits]


class DUFormer:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg = config
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        store = self.store
        ch = cfg.stage_channels

        self.stem = Stem(store, "token_encoder.stem", cfg.input_channels, ch[0], cfg.stem_downsample, rng)
        self.stages = []
        prev_c, prev_d = ch[0], cfg.stem_downsample
        for i in range(4):
            stride = cfg.stage_downsamples[i] // prev_d
            name = f"token_encoder.stage{i + 1}"
            if cfg.heavy_encoder:
                mid = max(2, int(round(ch[i] * cfg.dub_mid_ratio)))
                block = DoubleUBlock(store, f"{name}.dub", prev_c, ch[i], rng, stride=stride, mid=mid)
            else:
                block = LightStage(store, f"{name}.light", prev_c, ch[i], rng, stride=stride)
            self.stages.append(block)
            prev_c, prev_d = ch[i], cfg.stage_downsamples[i]
        self.transition_pool = cfg.stage_downsamples[4] // prev_d == 2
        self.transition = Transition(store, "token_encoder.stage5.transition", prev_c, ch[4], rng)

        self.enhancers = {}
        for s in range(1, 6):
            name = f"token_encoder.stage{s}"
            if s in cfg.plab_stages:
                self.enhancers[s] = PLAB(store, f"{name}.plab", ch[s - 1], rng)
            elif s in cfg.biscse_stages:
                self.enhancers[s] = BiscSE(store, f"{name}.biscse", ch[s - 1], rng, cfg.biscse_variant)

        e = cfg.embed_dim
        self.token_in = Linear(store, "transformer.token_in", cfg.token_dim, e, rng)
        self.blocks = [
            TransformerBlock(store, f"transformer.block{b}", e, cfg.num_heads, cfg.head_dim, cfg.ffn_expansion, rng)
            for b in range(cfg.transformer_depth)
        ]
        self.token_out = Linear(store, "transformer.token_out", e, cfg.token_dim, rng)

        self.decoders = [StageDecoder(store, s, ch[s - 1], cfg.num_classes, rng) for s in range(1, 6)]
        self.fuse_head = Conv2d(store, "head.fuse", 5 * cfg.num_classes, cfg.num_classes, 1, rng)

    # -- pieces --------------------------------------------------------------
    def check_input(self, image: Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected [N, {self.config.input_channels}, H, W] input, got {image.shape}"
            )
        m = self.config.max_downsample
        h, w = image.shape[2:]
        if h % m or w % m:
            raise ShapeError(f"input extents {(h, w)} must be multiples of {m}")

    def encode(self, image: Tensor) -> EncoderState:
        self.check_input(image)
        x = self.stem(image)
        dub_outs = []
        for block in self.stages:
            x = block(x)
            dub_outs.append(x)
        if self.transition_pool:
            x = T.avg_pool2d(x, 2, 2)
        dub_outs.append(self.transition(x))

        enhanced, stage_outputs = [], []
        for s, d in enumerate(dub_outs, start=1):
            block = self.enhancers.get(s)
            if block is None:
                enhanced.append(d)
                stage_outputs.append(d)
            else:
                enh = block(d)
                enhanced.append(enh)
                stage_outputs.append(fuse_stage(d, enh))
        return EncoderState(tuple(image.shape[2:]), dub_outs, enhanced, stage_outputs)

    def transform(self, tokens: Tensor) -> Tensor:
        x = self.token_in(tokens)
        for block in self.blocks:
            x = block(x)
        return self.token_out(x)

    def decode(self, tokens_out: Tensor, state: Optional[EncoderState], grid) -> ForwardOutputs:
        if state is None:
            raise ValueError("decode needs the cached encoder state")
        n, t, d = tokens_out.shape
        ht, wt = grid
        if t != ht * wt or d != self.config.token_dim:
            raise ShapeError(f"tokens {tokens_out.shape} do not match grid {grid} / width {self.config.token_dim}")
        fmap = tokens_out.transpose(0, 2, 1).reshape(n, d, ht, wt)
        groups = T.split(fmap, self.config.stage_channels, axis=1)
        h, w = state.input_hw
        logits = []
        for dec, g, enh, dub in zip(self.decoders, groups, state.enhanced, state.dub_outputs):
            logits.append(upsample_to(dec(g, enh, dub), size=(h, w)))
        fused = self.fuse_head(T.concat(logits, axis=1))
        return ForwardOutputs(logits, fused, list(state.stage_outputs))

    def __call__(self, image: Tensor) -> ForwardOutputs:
        state = self.encode(image)
        grid = self.config.grid_for(*state.input_hw)
        tokens = tokenize(state.stage_outputs, grid)
        return self.decode(self.transform(tokens), state, grid)

    def predict_proba(self, image: Tensor) -> np.ndarray:
        """Foreground probability map [N, H, W] from the fused logits, no tape."""
        with T.no_grad():
            out = self(image)
            return T.softmax(out.fused_logits, axis=1).data[:, 1]

    def count_params(self) -> dict:
        return count_params(self.store)


def duformer_forward(image: Tensor, config: ModelConfig, seed: int = 0) -> ForwardOutputs:
    return DUFormer(config, seed=seed, dtype=image.dtype)(image)


def count_params(store: ParamStore) -> dict:
    """Parameter totals per region and the token-encoder / transformer ratio."""
    counts = {"token_encoder": 0, "transformer": 0, "decoder": 0, "head": 0}
    for name, p in store.items():
        counts[store.region_of(name)] += p.size
    if counts["transformer"] == 0:
        raise ValueError("transformer region is empty; ratio undefined")
    counts["total"] = sum(counts.values())
    counts["ratio"] = Fraction(counts["token_encoder"], counts["transformer"])
    return counts
