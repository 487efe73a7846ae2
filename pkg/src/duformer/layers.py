"""Parameter storage and the small trainable layers blocks are built from."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

REGIONS = ("token_encoder", "transformer", "decoder", "head")


class ParamStore:
    """Ordered name -> parameter map; every name starts with its region tag."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        region = name.split(".", 1)[0]
        if region not in REGIONS:
            raise ValueError(f"parameter {name!r} lacks a region tag from {REGIONS}")
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        p = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def region_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        kernel,
        rng: np.random.Generator,
        stride=1,
        padding=None,
        dilation=1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        kh, kw = T._pair(kernel)
        dh, dw = T._pair(dilation)
        if padding is None:
            padding = (dh * (kh - 1) // 2, dw * (kw - 1) // 2)
        self.stride, self.padding, self.dilation = stride, padding, (dh, dw)
        shape = (cout, cin, kh, kw)
        w = np.zeros(shape) if zero_init else fan_in_uniform(rng, shape, cin * kh * kw)
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Linear:
    """Affine map over the last axis: ``x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        din: int,
        dout: int,
        rng: np.random.Generator,
        zero_init: bool = False,
    ):
        w = np.zeros((din, dout)) if zero_init else fan_in_uniform(rng, (din, dout), din)
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def conv_relu(conv: Conv2d, x: Tensor) -> Tensor:
    return T.relu(conv(x))


def upsample_to(x: Tensor, like: Optional[Tensor] = None, size=None) -> Tensor:
    size = like.shape[2:] if like is not None else size
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return T.bilinear_upsample(x, tuple(size))
