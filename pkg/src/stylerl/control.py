"""Environment, replay pool and the maximum-entropy actor-critic updates."""

from __future__ import annotations

from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import AgentParams
from .errors import ContractError, NumericError
from .features import FeatureBackbone
from .networks import State, actor_forward, builder_forward
from .nn import Module
from .objectives import reward as style_reward
from .optim import Adam
from .tensor import Tensor, no_grad


@dataclass
class Transition:
    state: State
    action: Tensor
    reward: float
    next_state: State
    done: bool


@dataclass
class Episode:
    content: Tensor
    style: Tensor
    horizon: int
    trajectory: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.trajectory:
            self.trajectory.append(self.content)

    @property
    def t(self) -> int:
        return len(self.trajectory) - 1

    @property
    def finished(self) -> bool:
        return self.t >= self.horizon

    def state(self) -> State:
        return State(self.trajectory[-1], self.style)


class ReplayPool:
    """Bounded FIFO of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.records: deque[Transition] = deque(maxlen=capacity)

    def push(self, transition: Transition) -> None:
        self.records.append(transition)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def pool_sample(pool: ReplayPool, n: int, rng: np.random.Generator) -> list[Transition]:
    """n records drawn uniformly without replacement."""
    if len(pool) < n:
        raise ContractError(f"replay pool holds {len(pool)} records, {n} requested: warm-up not complete")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool.records[i] for i in idx]


def stack_states(states: Sequence[State]) -> State:
    return State(
        Tensor(np.concatenate([s.moving.data for s in states]), dtype=states[0].moving.dtype),
        Tensor(np.concatenate([s.style.data for s in states]), dtype=states[0].style.dtype),
    )


@contextmanager
def frozen(module: Module):
    """Temporarily stop a module's parameters from recording gradients."""
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def env_step(agent: AgentParams, backbone: FeatureBackbone, state: State, rng: np.random.Generator,
             style_targets=None):
    """Sample an action, build the next moving image and score it.

    ``style_targets`` optionally supplies precomputed backbone statistics of
    the style image.  Returns ``(action, reward, next_state)``; nothing is
    recorded on a tape.
    """
    with no_grad():
        out = actor_forward(agent.actor, state, rng=rng)
        moving = builder_forward(agent.builder, out.content_features, out.action, out.signals)
    r = style_reward(backbone, moving, state.style if style_targets is None else style_targets)
    return out.action.detach(), r, State(moving.detach(), state.style)


def _check_finite(name: str, loss: Tensor) -> None:
    # checked before any parameter moves, so an abort leaves the last good values in place
    if not np.isfinite(loss.item()):
        raise NumericError(f"{name} is not finite ({loss.item()})")


def soft_bellman_target(reward, next_q, next_log_prob, gamma: float, alpha: float, done) -> np.ndarray:
    """r + gamma * (Q_target(y', x') - alpha * log pi(x'|y')), or r at terminal steps."""
    reward = np.asarray(reward, dtype=np.float64)
    soft_value = np.asarray(next_q, dtype=np.float64) - alpha * np.asarray(next_log_prob, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    return reward + gamma * live * soft_value


def bellman_residual(q: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of 0.5 * (Q - target)^2 with the target held fixed."""
    t = Tensor(np.asarray(target).reshape(q.shape), dtype=q.dtype)
    return (0.5 * (q - t).square()).mean()


def critic_update(
    agent: AgentParams,
    batch: Sequence[Transition],
    gamma: float,
    alpha: float,
    optimizer: Adam,
    rng: np.random.Generator,
    lr: float | None = None,
) -> float:
    """One gradient step on the soft Bellman residual; returns J_Q."""
    if not batch:
        raise ContractError("critic update needs a non-empty batch")
    state = stack_states([tr.state for tr in batch])
    nxt = stack_states([tr.next_state for tr in batch])
    action = Tensor(np.concatenate([tr.action.data for tr in batch]), dtype=batch[0].action.dtype)
    rewards = np.array([tr.reward for tr in batch])
    done = np.array([tr.done for tr in batch])
    with no_grad():
        nout = actor_forward(agent.actor, nxt, rng=rng)
        q_next = agent.target_critic(nxt, nout.action)
    target = soft_bellman_target(rewards, q_next.data, nout.log_prob.data, gamma, alpha, done)
    q = agent.critic(state, action)
    loss = bellman_residual(q, target)
    _check_finite("J_Q", loss)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return loss.item()


def actor_update(
    agent: AgentParams,
    states: Sequence[State] | State,
    alpha: float,
    optimizer: Adam,
    rng: np.random.Generator,
    lr: float | None = None,
) -> tuple[float, np.ndarray]:
    """One reparameterized step on mean(alpha * log pi - Q); the critic is untouched.

    Returns J_P and the detached per-sample log-probabilities of the sampled actions.
    """
    if not isinstance(states, State):
        if not states:
            raise ContractError("actor update needs a non-empty batch")
        states = stack_states(states)
    with frozen(agent.critic):
        out = actor_forward(agent.actor, states, rng=rng)
        q = agent.critic(states, out.action)
        loss = (alpha * out.log_prob - q).mean()
        _check_finite("J_P", loss)
        optimizer.zero_grad()
        loss.backward()
    optimizer.step(lr)
    return loss.item(), out.log_prob.data.copy()


def alpha_update(
    agent: AgentParams,
    states_or_log_prob,
    target_entropy: float,
    optimizer: Adam,
    rng: np.random.Generator | None = None,
    lr: float | None = None,
) -> float:
    """One step on mean(-alpha * (log pi + target_entropy)) w.r.t. log alpha.

    Accepts a batch of states (a fresh sample is drawn) or precomputed
    log-probabilities of actions sampled from the current policy.
    """
    if isinstance(states_or_log_prob, np.ndarray):
        log_prob = states_or_log_prob
    else:
        states = states_or_log_prob
        if not isinstance(states, State):
            states = stack_states(states)
        with no_grad():
            log_prob = actor_forward(agent.actor, states, rng=rng).log_prob.data
    slack = Tensor(np.mean(np.asarray(log_prob, dtype=np.float64) + target_entropy), dtype=agent.log_alpha.dtype)
    loss = -(agent.log_alpha.exp() * slack)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return agent.alpha
