"""Training loop, poly learning-rate schedule, optimizers and evaluation helpers."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, restore, snapshot
from .data import SampleRecord, images_to_tensor, load_split
from .layers import ParamStore
from .losses import LossWeights, joint_loss
from .metrics import EvalReport, evaluate_dataset
from .model import DUFormer, ModelConfig

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 500
    initial_lr: float = 9e-4
    lr_power: float = 1.0
    weight_decay: float = 0.01
    batch_size: int = 2
    crop: tuple[int, int] = (64, 64)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    loss: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 100
    checkpoint_dir: str = "runs/default"
    optimizer: str = "adamw"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    hflip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop", tuple(int(v) for v in self.crop))
        object.__setattr__(self, "betas", tuple(float(v) for v in self.betas))
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        m = self.model.max_downsample
        if self.crop[0] % m or self.crop[1] % m:
            raise ValueError(f"crop {self.crop} must be a multiple of the model downsample {m}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["crop"] = list(self.crop)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d:
            base = ModelConfig.tiny().to_dict()
            base.update(d["model"])
            d["model"] = ModelConfig.from_dict(base)
        if "loss" in d:
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """``initial_lr * (1 - iter / max_iters) ** lr_power``."""
    if not 0 <= iteration <= cfg.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.initial_lr * (1.0 - iteration / cfg.max_iters) ** cfg.lr_power


class SGD:
    """Momentum SGD with decoupled weight decay."""

    def __init__(self, store: ParamStore, momentum: float = 0.9, weight_decay: float = 0.0):
        self.store, self.momentum, self.weight_decay = store, momentum, weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self, lr: float) -> None:
        for name, p in self.store.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * v


class AdamW:
    def __init__(self, store: ParamStore, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.store, self.betas, self.weight_decay, self.eps = store, betas, weight_decay, eps
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype)


def make_optimizer(store: ParamStore, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(store, cfg.momentum, cfg.weight_decay)
    return AdamW(store, cfg.betas, cfg.weight_decay)


def augment(samples: Sequence[SampleRecord], crop, rng: np.random.Generator, hflip: bool = True):
    """Seeded random crop and horizontal flip; returns stacked images and masks."""
    ch, cw = crop
    images, masks = [], []
    for s in samples:
        h, w = s.mask.shape
        if h < ch or w < cw:
            raise ValueError(f"sample {s.id} ({h}x{w}) smaller than crop {crop}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = s.image[top : top + ch, left : left + cw]
        msk = s.mask[top : top + ch, left : left + cw]
        if hflip and rng.random() < 0.5:
            img, msk = img[:, ::-1], msk[:, ::-1]
        images.append(np.ascontiguousarray(img))
        masks.append(np.ascontiguousarray(msk))
    return images, np.stack(masks)


class BatchSampler:
    """Epoch-wise seeded shuffling; batch composition depends only on the seed."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("training split is empty")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop(0)))
        return out


@dataclass
class TrainResult:
    model: DUFormer
    log: list[dict]
    evals: list[dict]
    checkpoint: Checkpoint


def _format_log(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True, separators=(",", ":"))


def train(
    cfg: TrainConfig,
    train_samples: Sequence[SampleRecord],
    val_samples: Sequence[SampleRecord] = (),
    log_path: Optional[str | os.PathLike] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train from scratch; logs one JSON line per iteration.

    Each iteration draws a batch, augments it, runs the forward pass and the
    joint loss, backpropagates and steps with the poly learning rate of that
    iteration.  A non-finite loss aborts with :class:`DivergenceError`.
    """
    rng = np.random.default_rng(cfg.seed)
    model = DUFormer(cfg.model, seed=cfg.seed)
    opt = make_optimizer(model.store, cfg)
    sampler = BatchSampler(len(train_samples), cfg.batch_size, rng)
    log, evals = [], []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for it in range(cfg.max_iters):
            lr = poly_lr(it, cfg)
            batch = [train_samples[i] for i in sampler.next()]
            images, masks = augment(batch, cfg.crop, rng, cfg.hflip)
            out = model(images_to_tensor(images, model.store.dtype))
            loss = joint_loss(out.all_logits, masks, cfg.loss)
            value = loss.total.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at iteration {it + 1}")
            model.store.zero_grad()
            loss.total.backward()
            opt.step(lr)
            entry = {"iter": it + 1, "lr": lr, **loss.breakdown()}
            log.append(entry)
            if fh is not None:
                fh.write(_format_log(entry) + "\n")
            if on_log is not None:
                on_log(entry)
            if val_samples and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                report = evaluate_dataset(model, val_samples)
                record = {"iter": it + 1, **report.as_dict()}
                evals.append(record)
                if fh is not None:
                    fh.write(_format_log({"eval": record}) + "\n")
    finally:
        if fh is not None:
            fh.close()
    ckpt = Checkpoint(
        config=cfg.to_dict(),
        params=snapshot(model.store),
        iteration=cfg.max_iters,
        rng_state=rng.bit_generator.state,
    )
    return TrainResult(model, log, evals, ckpt)


def train_from_manifest(cfg: TrainConfig, manifest, log_path=None, on_log=None) -> TrainResult:
    return train(cfg, load_split(manifest, "train"), load_split(manifest, "val"), log_path, on_log)


def model_from_checkpoint(ckpt: Checkpoint, model_config: Optional[ModelConfig] = None) -> DUFormer:
    cfg = model_config or TrainConfig.from_dict(ckpt.config).model
    model = DUFormer(cfg)
    restore(model.store, ckpt.params)
    return model


def evaluate_checkpoint(ckpt: Checkpoint, manifest, split: str = "val") -> EvalReport:
    samples = load_split(manifest, split)
    if not samples:
        raise ValueError(f"split {split!r} of {manifest} is empty")
    return evaluate_dataset(model_from_checkpoint(ckpt), samples)
