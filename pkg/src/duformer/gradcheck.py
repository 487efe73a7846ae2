"""Named finite-difference gradient checks for ops, blocks, losses and the model.

Every target builds its own float64 inputs from a seed and returns a scalar
function of them.  Non-scalar outputs are reduced with a fixed random
projection so every output element contributes a distinct weight.  Inputs to
kinked ops (relu, clip, max) are kept away from their kinks so the central
difference never straddles one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .blocks import (
    BISCSE_VARIANTS,
    PLAB,
    BiscSE,
    DoubleUBlock,
    LightStage,
    MultiHeadAttention,
    StageDecoder,
    Stem,
    Transition,
    TransformerBlock,
    attention_head,
    fuse_stage,
    tokenize,
)
from .layers import ParamStore
from .losses import (
    LossWeights,
    cross_entropy_loss,
    dice_loss,
    focal_loss,
    joint_loss,
    phi_loss,
)
from .model import DUFormer, ModelConfig
from .tensor import Tensor

TOLERANCE = 1e-4
F64 = np.float64


@dataclass(frozen=True)
class Target:
    name: str
    group: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    max_coords: Optional[int] = None
    eps: float = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def _randn(rng, *shape) -> Tensor:
    return _t(rng.standard_normal(shape))


def _away_from_zero(rng, *shape, margin=0.1) -> Tensor:
    x = rng.uniform(margin, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return _t(x)


def _distinct(rng, *shape) -> Tensor:
    """Values spaced 0.05 apart in random order, so maxima never tie."""
    n = int(np.prod(shape))
    return _t((rng.permutation(n) * 0.05 - n * 0.025 + 0.0125).reshape(shape))


def _project(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def projected(fn: Callable[..., Tensor], rng, out_shape) -> Callable[..., Tensor]:
    r = _project(rng, out_shape)
    return lambda *xs: T.tsum(fn(*xs) * Tensor(r))


def _unary(fn, make=_randn, shape=(2, 3, 4)):
    def build(rng):
        x = make(rng, *shape)
        out_shape = fn(x).shape
        return projected(fn, rng, out_shape), [x]

    return build


def _binary(fn, make_a=_randn, make_b=_randn, shape_a=(2, 3, 4), shape_b=(2, 3, 4)):
    def build(rng):
        a, b = make_a(rng, *shape_a), make_b(rng, *shape_b)
        return projected(fn, rng, fn(a, b).shape), [a, b]

    return build


def _positive(rng, *shape) -> Tensor:
    return _t(rng.uniform(0.5, 2.0, size=shape))


def _conv(stride=1, padding=1, dilation=1, kernel=(3, 3)):
    def build(rng):
        x = _randn(rng, 2, 3, 7, 6)
        w = _randn(rng, 4, 3, *kernel)
        b = _randn(rng, 4)
        fn = lambda x, w, b: T.conv2d(x, w, b, stride, padding, dilation)  # noqa: E731
        return projected(fn, rng, fn(x, w, b).shape), [x, w, b]

    return build


def _gap(rng, *shape) -> Tensor:
    return _distinct(rng, *shape)


def _max_pair(rng):
    a = _distinct(rng, 2, 3, 4)
    b = _t(a.data + rng.choice([-0.02, 0.02], size=a.shape))
    fn = T.maximum
    return projected(fn, rng, a.shape), [a, b]


OP_TARGETS = [
    Target("add", "ops", _binary(T.add, shape_b=(3, 4))),
    Target("sub", "ops", _binary(T.sub, shape_b=(1, 4))),
    Target("mul", "ops", _binary(T.mul, shape_b=(2, 1, 4))),
    Target("div", "ops", _binary(T.div, make_b=_positive)),
    Target("neg", "ops", _unary(T.neg)),
    Target("scale", "ops", _unary(lambda x: T.scale(x, -2.5))),
    Target("power", "ops", _unary(lambda x: T.power(x, 3.0), make=_away_from_zero)),
    Target("exp", "ops", _unary(T.exp)),
    Target("log", "ops", _unary(T.log, make=_positive)),
    Target("sqrt", "ops", _unary(T.sqrt, make=_positive)),
    Target("relu", "ops", _unary(T.relu, make=_away_from_zero)),
    Target("sigmoid", "ops", _unary(T.sigmoid)),
    Target("clip", "ops", _unary(lambda x: T.clip(x, -0.5, 0.5), make=_gap)),
    Target("maximum", "ops", _max_pair),
    Target("sum", "ops", _unary(lambda x: T.tsum(x, axis=1, keepdims=True))),
    Target("mean", "ops", _unary(lambda x: T.mean(x, axis=(0, 2)))),
    Target("reshape", "ops", _unary(lambda x: T.reshape(x, (4, 6)))),
    Target("transpose", "ops", _unary(lambda x: T.transpose(x, (2, 0, 1)))),
    Target("getitem", "ops", _unary(lambda x: T.getitem(x, (slice(None), [0, 2, 2], slice(1, 3))))),
    Target("concat", "ops", _binary(lambda a, b: T.concat([a, b], axis=1), shape_b=(2, 2, 4))),
    Target("split", "ops", _unary(lambda x: T.split(x, (1, 2), axis=1)[1] * T.split(x, (2, 1), axis=1)[1])),
    Target("matmul", "ops", _binary(T.matmul, shape_a=(2, 3, 4), shape_b=(4, 5))),
    Target("softmax", "ops", _unary(lambda x: T.softmax(x, axis=1))),
    Target(
        "layer_norm",
        "ops",
        lambda rng: (
            lambda x, g, b, r=_project(rng, (2, 3, 5)): T.tsum(T.layer_norm(x, g, b) * Tensor(r)),
            [_randn(rng, 2, 3, 5), _randn(rng, 5), _randn(rng, 5)],
        ),
    ),
    Target("conv2d", "ops", _conv()),
    Target("conv2d_strided", "ops", _conv(stride=2, padding=1)),
    Target("conv2d_dilated", "ops", _conv(padding=(0, 2), dilation=(1, 2), kernel=(1, 3))),
    Target("max_pool2d", "ops", _unary(lambda x: T.max_pool2d(x, 2, 2), make=_distinct, shape=(2, 2, 4, 6))),
    Target("avg_pool2d", "ops", _unary(lambda x: T.avg_pool2d(x, 2, 2), shape=(2, 2, 4, 6))),
    Target("adaptive_avg_pool2d", "ops", _unary(lambda x: T.adaptive_avg_pool2d(x, (2, 3)), shape=(1, 2, 5, 7))),
    Target("bilinear_upsample", "ops", _unary(lambda x: T.bilinear_upsample(x, (5, 7)), shape=(1, 2, 3, 2))),
]


def softmax_invariant(name: str) -> bool:
    """Key biases shift each attention score row by a constant, which softmax ignores.

    Their gradient is exactly zero, so a finite difference only measures
    rounding noise; they are held out of the relative-error check.
    """
    return name.endswith(".k.bias")


def _checked_params(store: ParamStore) -> list[Tensor]:
    params = []
    for name, p in store.items():
        p.requires_grad = not softmax_invariant(name)
        params.append(p)
    return params


def _to_f64_random(store: ParamStore, rng, scale: float = 0.3) -> list[Tensor]:
    """Give every parameter a random float64 value (including zero-initialised ones)."""
    for _, p in store.items():
        p.data = rng.standard_normal(p.shape) * scale
    return _checked_params(store)


def _block(make, in_shape, max_coords=None, input_fn=_randn):
    def build(rng):
        store = ParamStore(F64)
        module = make(store, rng)
        params = _to_f64_random(store, rng)
        x = input_fn(rng, *in_shape)
        return projected(lambda x, *_: module(x), rng, module(x).shape), [x, *params]

    return build


def _biscse(variant):
    return _block(lambda s, r: BiscSE(s, "token_encoder.biscse", 4, r, variant), (1, 4, 5, 5))


def _attention(rng):
    q, k, v = _randn(rng, 2, 3, 4), _randn(rng, 2, 5, 4), _randn(rng, 2, 5, 3)
    return projected(attention_head, rng, (2, 3, 3)), [q, k, v]


def _tokenize(rng):
    a, b = _randn(rng, 1, 2, 6, 6), _randn(rng, 1, 3, 3, 3)
    fn = lambda a, b: tokenize([a, b], (2, 2))  # noqa: E731
    return projected(fn, rng, fn(a, b).shape), [a, b]


def _stage_decoder(rng):
    store = ParamStore(F64)
    dec = StageDecoder(store, 1, 3, 2, rng)
    params = _to_f64_random(store, rng)
    tok, enh, dub = _randn(rng, 1, 3, 2, 2), _randn(rng, 1, 3, 4, 4), _randn(rng, 1, 3, 4, 4)
    fn = lambda t, e, d, *_: dec(t, e, d)  # noqa: E731
    return projected(fn, rng, (1, 2, 4, 4)), [tok, enh, dub, *params]


BLOCK_TARGETS = [
    Target("stem", "blocks", _block(lambda s, r: Stem(s, "token_encoder.stem", 3, 4, 4, r), (1, 3, 8, 8))),
    Target("dub", "blocks", _block(lambda s, r: DoubleUBlock(s, "token_encoder.dub", 3, 4, r, mid=2), (1, 3, 6, 6)), 6),
    Target(
        "dub_strided",
        "blocks",
        _block(lambda s, r: DoubleUBlock(s, "token_encoder.dub", 3, 4, r, stride=2, mid=2), (1, 3, 8, 8)),
        6,
    ),
    Target("light_stage", "blocks", _block(lambda s, r: LightStage(s, "token_encoder.light", 3, 4, r, 2), (1, 3, 6, 6))),
    Target("transition", "blocks", _block(lambda s, r: Transition(s, "token_encoder.transition", 3, 4, r), (1, 3, 7, 7))),
    Target("plab", "blocks", _block(lambda s, r: PLAB(s, "token_encoder.plab", 3, r), (1, 3, 6, 7))),
    *[Target(f"biscse_{v}", "blocks", _biscse(v)) for v in BISCSE_VARIANTS],
    Target("fusion", "blocks", _binary(fuse_stage, shape_a=(1, 2, 3, 3), shape_b=(1, 2, 3, 3))),
    Target("tokenize", "blocks", _tokenize),
    Target("attention", "blocks", _attention),
    Target(
        "multi_head_attention",
        "blocks",
        _block(lambda s, r: MultiHeadAttention(s, "transformer.attn", 6, 2, 3, r), (2, 4, 6)),
    ),
    Target(
        "transformer_block",
        "blocks",
        _block(lambda s, r: TransformerBlock(s, "transformer.block", 6, 2, 3, 2, r), (2, 4, 6)),
        eps=1e-5,
    ),
    Target("stage_decoder", "blocks", _stage_decoder),
]


def _target_mask(rng, shape) -> np.ndarray:
    m = (rng.random(shape) < 0.3).astype(np.int64)
    m.flat[0], m.flat[1] = 0, 1
    return m


def _prob_loss(loss_fn):
    def build(rng):
        logits = _randn(rng, 2, 2, 4, 5)
        target = _target_mask(rng, (2, 4, 5))
        return (lambda z: loss_fn(T.softmax(z, axis=1), target)), [logits]

    return build


def _joint(rng):
    maps = [_randn(rng, 2, 2, 4, 4) for _ in range(6)]
    target = _target_mask(rng, (2, 4, 4))
    w = LossWeights(stage_weights=(1.0, 0.5, 0.5, 0.25, 0.25, 1.0))
    return (lambda *ms: joint_loss(list(ms), target, w).total), maps


LOSS_TARGETS = [
    Target("focal_loss", "losses", _prob_loss(focal_loss)),
    Target("cross_entropy_loss", "losses", _prob_loss(cross_entropy_loss)),
    Target("phi_loss", "losses", _prob_loss(phi_loss)),
    Target("phi_loss_theta2", "losses", _prob_loss(lambda p, t: phi_loss(p, t, theta=2.0))),
    Target("dice_loss", "losses", _prob_loss(dice_loss)),
    Target("joint_loss", "losses", _joint),
]


def _full_model(rng):
    """All six logit maps of the tiny model at 1x3x16x16, randomly projected.

    A random projection rather than the pixel-averaged loss keeps gradients
    well above the finite-difference noise floor; the loss head is covered
    by the loss targets.
    """
    model = DUFormer(ModelConfig.tiny(), seed=int(rng.integers(2**31)), dtype=F64)
    for _, p in model.store.items():
        # zero-initialised layers would make every upstream attention gradient exactly 0
        if not np.any(p.data):
            p.data = rng.standard_normal(p.shape) * 0.05
    params = _checked_params(model.store)
    image = _t(rng.uniform(-1, 1, size=(1, 3, 16, 16)))
    weights = [Tensor(_project(rng, (1, 2, 16, 16))) for _ in range(6)]

    def fn(x, *_):
        maps = model(x).all_logits
        total = T.tsum(maps[0] * weights[0])
        for m, r in zip(maps[1:], weights[1:]):
            total = total + T.tsum(m * r)
        return total

    return fn, [image, *params]


MODEL_TARGETS = [Target("full-model", "model", _full_model, max_coords=2, eps=1e-5)]

TARGETS = {t.name: t for t in OP_TARGETS + BLOCK_TARGETS + LOSS_TARGETS + MODEL_TARGETS}
GROUPS = {"ops": OP_TARGETS, "blocks": BLOCK_TARGETS, "losses": LOSS_TARGETS, "all": list(TARGETS.values())}


def scopes() -> list[str]:
    return sorted(GROUPS) + sorted(TARGETS)


def resolve(scope: str) -> list[Target]:
    if scope in GROUPS:
        return list(GROUPS[scope])
    if scope in TARGETS:
        return [TARGETS[scope]]
    raise KeyError(scope)


def check(target: Target, seed: int = 0, eps: Optional[float] = None) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, inputs = target.build(rng)
    err = T.grad_check(fn, inputs, eps=eps or target.eps, max_coords=target.max_coords, seed=seed)
    return CheckResult(target.name, err)


def run(scope: str, seed: int = 0) -> list[CheckResult]:
    return [check(t, seed) for t in resolve(scope)]
