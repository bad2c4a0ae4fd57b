"""Minimal module containers: named parameters, layers, state dicts."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from .errors import FormatError
from .tensor import Tensor, conv2d


class Module:
    """Tracks Tensor and Module attributes in assignment order."""

    def __setattr__(self, name, value):
        if isinstance(value, (Tensor, Module)):
            order = self.__dict__.setdefault("_order", [])
            if name not in order:
                order.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in arrays:
                raise FormatError(f"missing array {key!r}")
            arr = np.asarray(arrays[key])
            if arr.shape != p.shape:
                raise FormatError(f"array {key!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def orthogonal(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols].reshape(shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, init="he", trainable=True):
        shape = (cout, cin, k, k)
        if init == "orthogonal":
            w = orthogonal(rng, shape, gain=np.sqrt(2.0))
        else:
            w = he_normal(rng, shape, cin * k * k)
        self.weight = Tensor(w, requires_grad=trainable)
        self.bias = Tensor(np.zeros(cout), requires_grad=trainable)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin, fout, rng, scale: float | None = None):
        std = np.sqrt(1.0 / fin) if scale is None else scale
        self.weight = Tensor(rng.normal(0.0, std, size=(fin, fout)), requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class ResBlock(Module):
    def __init__(self, ch, rng):
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.conv2 = Conv2d(ch, ch, 3, rng)
        # keep the residual branch small at init so the block starts near identity
        self.conv2.weight.data *= np.float32(0.1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x).relu())
