"""Adaptive-moment gradient descent over named tensors."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}
        # per-parameter applied-update counters, used to audit the training schedule
        self.updates = {name: 0 for name, _ in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if lr:
                update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - update).astype(p.dtype)
            self.updates[name] += 1

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.float64)}
        for name, _ in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        from .errors import FormatError

        key = f"{prefix}.t"
        if key not in arrays:
            raise FormatError(f"missing array {key!r}")
        self.t = int(arrays[key].reshape(-1)[0])
        for name, p in self.params:
            for kind, store in (("m", self.m), ("v", self.v)):
                k = f"{prefix}.{kind}.{name}"
                if k not in arrays:
                    raise FormatError(f"missing array {k!r}")
                if arrays[k].shape != p.shape:
                    raise FormatError(f"array {k!r} has shape {arrays[k].shape}, expected {p.shape}")
                store[name] = arrays[k].astype(np.float64)
