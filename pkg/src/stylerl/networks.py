"""Actor (unified policy), builder, critic and their parameter bookkeeping."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import Conv2d, Linear, Module, ResBlock
from .tensor import Tensor, avg_pool, channel_stats, concat, no_grad, upsample_nearest

ACTION_CHANNELS = 16
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
ACTION_BOUND = 1.0 - 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class State:
    """Moving image and style image, each N x 3 x H x W in [0, 1]."""

    moving: Tensor
    style: Tensor

    def __post_init__(self):
        if self.moving.shape[-2:] != self.style.shape[-2:]:
            raise DimensionError(
                f"moving {self.moving.shape} and style {self.style.shape} differ in spatial size"
            )


@dataclass
class StyleSignals:
    shallow_mean: Tensor
    shallow_std: Tensor
    deep_mean: Tensor
    deep_std: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.shallow_mean, self.shallow_std, self.deep_mean, self.deep_std


@dataclass
class PolicyOutput:
    mean: Tensor
    log_std: Tensor
    action: Tensor
    log_prob: Tensor  # one entry per sample
    signals: StyleSignals
    content_features: Tensor  # general-path features of the moving image, reused by the builder
    noise: np.ndarray


def _check_divisible(images: Tensor) -> None:
    h, w = images.shape[-2:]
    if h % 4 or w % 4:
        raise DimensionError(f"image size {h}x{w} is not divisible by 4")


def squashed_gaussian_log_prob(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterized tanh-Gaussian sample and its log-density per sample.

    The sample is ``clip(tanh(mean + exp(log_std) * noise))`` with the clip
    keeping it strictly inside (-1, 1); the density subtracts
    ``log(1 - action**2 + 1e-6)`` for the change of variables.
    """
    noise_t = Tensor(noise, dtype=mean.dtype)
    pre = mean + log_std.exp() * noise_t
    action = pre.tanh().clamp(-ACTION_BOUND, ACTION_BOUND)
    gauss = -0.5 * noise_t.square() - log_std - HALF_LOG_2PI
    correction = (1.0 - action.square() + SQUASH_EPS).log()
    per_elem = gauss - correction
    axes = tuple(range(1, mean.ndim))
    return action, per_elem.sum(axis=axes)


class Actor(Module):
    """Unified policy: one encoder for both images plus two style-space blocks.

    The general path (input conv, two strided convs, residual blocks) is shared
    by the moving and the style image.  The style image additionally passes the
    shallow style space (after the first downsampling) and the deep style space
    (after the residual blocks); their channel statistics are the style signals.
    """

    def __init__(self, rng: np.random.Generator, action_channels: int = ACTION_CHANNELS, in_kernel: int = 9):
        self.enc_in = Conv2d(3, 16, in_kernel, rng)
        self.enc_down1 = Conv2d(16, 32, 3, rng, stride=2)
        self.shallow_style = Conv2d(32, 32, 3, rng)
        self.enc_down2 = Conv2d(32, 64, 3, rng, stride=2)
        self.res1 = ResBlock(64, rng)
        self.res2 = ResBlock(64, rng)
        self.deep_style = Conv2d(64, 64, 3, rng)
        self.head = Conv2d(128, 2 * action_channels, 3, rng)
        self.head.weight.data *= np.float32(0.1)
        self.action_channels = action_channels

    def encode(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """General-feature path; returns (shallow, deep) feature maps."""
        h = self.enc_in(images).relu()
        shallow = self.enc_down1(h).relu()
        deep = self.enc_down2(shallow).relu()
        deep = self.res2(self.res1(deep)).relu()
        return shallow, deep

    def style_spaces(self, shallow: Tensor, deep: Tensor) -> tuple[Tensor, Tensor]:
        return self.shallow_style(shallow).relu(), self.deep_style(deep).relu()

    def signals(self, shallow: Tensor, deep: Tensor) -> StyleSignals:
        s_feat, d_feat = self.style_spaces(shallow, deep)
        sm, ss = channel_stats(s_feat)
        dm, ds = channel_stats(d_feat)
        return StyleSignals(sm, ss, dm, ds)

    def style_statistics(self, images: Tensor) -> list[Tensor]:
        """Per-level concatenated (mean, std) style-space statistics, N x 2C each."""
        sig = self.signals(*self.encode(images))
        return [concat([sig.shallow_mean, sig.shallow_std], axis=1), concat([sig.deep_mean, sig.deep_std], axis=1)]

    def forward(self, state: State, noise: np.ndarray | None = None, rng: np.random.Generator | None = None):
        return actor_forward(self, state, noise, rng)


def style_branch(actor: Actor, style: Tensor) -> tuple[Tensor, StyleSignals]:
    """Deep style-space features and style signals for a batch of style images.

    Replay batches repeat style images, so each distinct image is encoded once
    and the per-sample rows are gathered back; values and gradients equal
    encoding every sample separately.
    """
    n = style.shape[0]
    slots: dict[bytes, int] = {}
    inverse = np.array([slots.setdefault(img.tobytes(), len(slots)) for img in style.data], dtype=np.intp)
    distinct = len(slots) < n
    first = np.unique(inverse, return_index=True)[1]
    s_feat, d_feat = actor.style_spaces(*actor.encode(style[first] if distinct else style))
    sm, ss = channel_stats(s_feat)
    dm, ds = channel_stats(d_feat)
    if not distinct:
        return d_feat, StyleSignals(sm, ss, dm, ds)
    return d_feat[inverse], StyleSignals(sm[inverse], ss[inverse], dm[inverse], ds[inverse])


def actor_forward(
    actor: Actor, state: State, noise: np.ndarray | None = None, rng: np.random.Generator | None = None
) -> PolicyOutput:
    _check_divisible(state.moving)
    _, content = actor.encode(state.moving)
    d_feat, signals = style_branch(actor, state.style)

    head = actor.head(concat([content, d_feat], axis=1))
    a = actor.action_channels
    mean = head[:, :a]
    log_std = head[:, a:].clamp(LOG_STD_MIN, LOG_STD_MAX)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(mean.shape)
    noise = np.asarray(noise, dtype=mean.dtype)
    if noise.shape != mean.shape:
        raise DimensionError(f"noise shape {noise.shape} does not match action shape {mean.shape}")
    action, log_prob = squashed_gaussian_log_prob(mean, log_std, noise)
    return PolicyOutput(mean, log_std, action, log_prob, signals, content, noise)


def _modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """Instance-normalize ``h`` then apply per-channel scale/shift from the signals."""
    n, c = h.shape[:2]
    if shift.shape != (n, c) or scale.shape != (n, c):
        raise DimensionError(f"signal width {shift.shape} does not match features {h.shape[:2]}")
    mu, sd = channel_stats(h)
    normed = (h - mu.reshape(n, c, 1, 1)) / sd.reshape(n, c, 1, 1)
    return normed * scale.reshape(n, c, 1, 1) + shift.reshape(n, c, 1, 1)


class Builder(Module):
    """Decoder mirroring the encoder; style signals modulate two stages."""

    def __init__(self, rng: np.random.Generator, action_channels: int = ACTION_CHANNELS, out_kernel: int = 9):
        self.fuse = Conv2d(64 + action_channels, 64, 3, rng)
        self.up1 = Conv2d(64, 32, 3, rng)
        self.up2 = Conv2d(32, 16, 3, rng)
        self.out = Conv2d(16, 3, out_kernel, rng)
        self.out.weight.data *= np.float32(0.1)

    def forward(self, content_features: Tensor, action: Tensor, signals: StyleSignals) -> Tensor:
        return builder_forward(self, content_features, action, signals)


def builder_forward(builder: Builder, content_features: Tensor, action: Tensor, signals: StyleSignals) -> Tensor:
    if content_features.shape[-2:] != action.shape[-2:] or content_features.shape[0] != action.shape[0]:
        raise DimensionError(f"features {content_features.shape} and action {action.shape} misaligned")
    h = builder.fuse(concat([content_features, action], axis=1)).relu()
    h = _modulate(h, signals.deep_mean, signals.deep_std)
    h = builder.up1(upsample_nearest(h, 2)).relu()
    h = _modulate(h, signals.shallow_mean, signals.shallow_std)
    h = builder.up2(upsample_nearest(h, 2)).relu()
    return builder.out(h).sigmoid()


class Critic(Module):
    def __init__(self, rng: np.random.Generator, action_channels: int = ACTION_CHANNELS, width: int = 32):
        self.c1 = Conv2d(6 + action_channels, width, 3, rng)
        self.c2 = Conv2d(width, width, 3, rng, stride=2)
        self.head = Linear(width, 1, rng)

    def forward(self, state: State, action: Tensor) -> Tensor:
        return critic_forward(self, state, action)


def critic_forward(critic: Critic, state: State, action: Tensor) -> Tensor:
    """Q-value per sample, shape (N,)."""
    _check_divisible(state.moving)
    n, _, h, w = state.moving.shape
    if action.shape[0] != n or action.shape[-2:] != (h // 4, w // 4):
        raise DimensionError(f"action {action.shape} does not match state {state.moving.shape}")
    x = concat([avg_pool(state.moving, 4), avg_pool(state.style, 4), action], axis=1)
    x = critic.c2(critic.c1(x).relu()).relu()
    pooled = x.mean(axis=(2, 3))
    return critic.head(pooled).reshape(n)


def ema_update(critic: Module, target: Module, omega: float) -> None:
    """target <- omega * critic + (1 - omega) * target, in place."""
    if not 0.0 <= omega <= 1.0:
        raise ParameterError(f"omega must lie in [0, 1], got {omega}")
    for (name, p), (tname, tp) in zip(critic.named_parameters(), target.named_parameters()):
        assert name == tname
        if omega == 1.0:
            tp.data = p.data.copy()
        elif omega != 0.0:
            tp.data = (omega * p.data + (1.0 - omega) * tp.data).astype(tp.dtype)


def count_params(params: Module | Iterable[Tensor]) -> tuple[int, int]:
    """Scalar parameter count and its storage in bytes at 32-bit width."""
    if isinstance(params, Module):
        params = params.parameters()
    count = sum(int(p.size) for p in params)
    return count, 4 * count


def make_target(critic: Critic) -> Critic:
    target = copy.deepcopy(critic)
    for p in target.parameters():
        p.requires_grad = False
        p.grad = None
    return target


def policy_mode(actor: Actor, state: State) -> PolicyOutput:
    """Deterministic policy (zero noise) without gradient recording."""
    with no_grad():
        n, _, h, w = state.moving.shape
        noise = np.zeros((n, actor.action_channels, h // 4, w // 4))
        return actor_forward(actor, state, noise)
