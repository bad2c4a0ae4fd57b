"""Bundle of every learned parameter set, with flat named-array access."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .networks import Actor, Builder, Critic, make_target
from .objectives import UncertaintyWeights
from .tensor import Tensor

GROUPS = ("actor", "builder", "critic", "target_critic")


@dataclass
class AgentParams:
    actor: Actor
    builder: Builder
    critic: Critic
    target_critic: Critic
    log_alpha: Tensor
    weights: UncertaintyWeights = field(default_factory=UncertaintyWeights)

    @classmethod
    def initialize(cls, seed: int, init_alpha: float = 0.01) -> "AgentParams":
        rng = np.random.default_rng(seed)
        actor = Actor(rng)
        builder = Builder(rng)
        critic = Critic(rng)
        return cls(
            actor=actor,
            builder=builder,
            critic=critic,
            target_critic=make_target(critic),
            log_alpha=Tensor(math.log(init_alpha), requires_grad=True),
        )

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for group in GROUPS:
            for name, arr in getattr(self, group).state_dict().items():
                out[f"{group}.{name}"] = arr
        out["log_alpha"] = self.log_alpha.data.reshape(1).copy()
        out["uncertainty.s"] = self.weights.s.data.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for group in GROUPS:
            getattr(self, group).load_state_dict(arrays, prefix=f"{group}.")
        for key, target, shape in (("log_alpha", self.log_alpha, (1,)), ("uncertainty.s", self.weights.s, (3,))):
            if key not in arrays:
                raise FormatError(f"missing array {key!r}")
            if arrays[key].shape != shape:
                raise FormatError(f"array {key!r} has shape {arrays[key].shape}, expected {shape}")
            target.data = arrays[key].reshape(target.shape).astype(target.dtype)
