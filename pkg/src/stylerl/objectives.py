"""Generative losses, their uncertainty-weighted combination, and the reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .features import CONTENT_TAP, FeatureBackbone, extract
from .tensor import Tensor, cast, channel_stats, no_grad

CONTRASTIVE_EPS = 1e-8


def content_loss(backbone: FeatureBackbone, produced: Tensor, reference: Tensor, tap: int = CONTENT_TAP) -> Tensor:
    """Mean squared feature difference at one tap; the reference side is a fixed target."""
    if produced.shape != reference.shape:
        raise DimensionError(f"produced {produced.shape} and reference {reference.shape} differ")
    fp = extract(backbone, produced, upto=tap)[tap]
    with no_grad():
        fr = extract(backbone, reference.detach(), upto=tap)[tap]
    return (fp - fr).square().mean()


def style_targets(backbone: FeatureBackbone, style: Tensor) -> list[tuple[Tensor, Tensor]]:
    with no_grad():
        return [channel_stats(f) for f in extract(backbone, style.detach())]


def style_loss_per_sample(
    backbone: FeatureBackbone, produced: Tensor, style: Tensor | Sequence[tuple[Tensor, Tensor]]
) -> Tensor:
    """Sum over taps of squared mean and std distances, one value per sample."""
    targets = style_targets(backbone, style) if isinstance(style, Tensor) else style
    return _stats_distance(extract(backbone, produced), targets)


def _stats_distance(feats: Sequence[Tensor], targets: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    total = None
    for feat, (mu_s, sd_s) in zip(feats, targets):
        mu, sd = channel_stats(feat)
        if mu.shape != mu_s.shape:
            raise DimensionError(f"style statistics {mu_s.shape} do not match {mu.shape}")
        term = (mu - mu_s).square().sum(axis=1) + (sd - sd_s).square().sum(axis=1)
        total = term if total is None else total + term
    return total


def style_loss(backbone: FeatureBackbone, produced: Tensor, style: Tensor) -> Tensor:
    return style_loss_per_sample(backbone, produced, style).mean()


def perceptual_losses(
    backbone: FeatureBackbone,
    produced: Tensor,
    reference: Tensor,
    targets: Sequence[tuple[Tensor, Tensor]],
    tap: int = CONTENT_TAP,
) -> tuple[Tensor, Tensor]:
    """Content and style loss from a single backbone pass over ``produced``.

    Numerically identical to ``content_loss`` and ``style_loss`` evaluated
    separately; ``targets`` are precomputed style statistics (``style_targets``).
    """
    if produced.shape != reference.shape:
        raise DimensionError(f"produced {produced.shape} and reference {reference.shape} differ")
    feats = extract(backbone, produced)
    with no_grad():
        fr = extract(backbone, reference.detach(), upto=tap)[tap]
    l_co = (feats[tap] - fr).square().mean()
    return l_co, _stats_distance(feats, targets).mean()


def stack_targets(per_image: Sequence[Sequence[tuple[Tensor, Tensor]]]) -> list[tuple[Tensor, Tensor]]:
    """Concatenate per-image style statistics along the batch axis."""
    out = []
    for level in zip(*per_image):
        mu = np.concatenate([m.data for m, _ in level])
        sd = np.concatenate([s.data for _, s in level])
        out.append((Tensor(mu, dtype=mu.dtype), Tensor(sd, dtype=sd.dtype)))
    return out


def reward(backbone: FeatureBackbone, produced: Tensor, style: Tensor) -> np.ndarray | float:
    """Negative style loss, evaluated without recording gradients."""
    with no_grad():
        r = -style_loss_per_sample(backbone, produced.detach(), style).data
    return float(r[0]) if r.size == 1 else r


def contrastive_loss(moving_feats: Sequence[Tensor], style_feats: Sequence[Tensor], eps: float = CONTRASTIVE_EPS) -> Tensor:
    """Ratio-form contrastive loss over K feature levels.

    For every sample i and level k the squared distance to its own style
    features is divided by the summed squared distances to every other
    sample's style features (plus ``eps``); the ratios are summed.
    """
    if len(moving_feats) != len(style_feats) or not moving_feats:
        raise ContractError("need the same non-zero number of levels for moving and style features")
    n = moving_feats[0].shape[0]
    if n < 2:
        raise ContractError("contrastive loss requires batch ≥ 2")
    eye = np.eye(n)
    total = None
    for fm, fs in zip(moving_feats, style_feats):
        if fm.ndim != 2 or fm.shape != fs.shape or fm.shape[0] != n:
            raise DimensionError(f"level features must both be N x D, got {fm.shape} and {fs.shape}")
        d = fm.shape[1]
        diff = fm.reshape(n, 1, d) - fs.reshape(1, n, d)
        dist = diff.square().sum(axis=2)  # dist[i, j] = |m_i - s_j|^2
        pos = (dist * Tensor(eye, dtype=dist.dtype)).sum(axis=1)
        neg = (dist * Tensor(1.0 - eye, dtype=dist.dtype)).sum(axis=1)
        term = (pos / (neg + eps)).sum()
        total = term if total is None else total + term
    return total


class UncertaintyWeights:
    """Learnable log-variances s_i = log sigma_i^2 for the three losses."""

    names = ("content", "style", "contrastive")

    def __init__(self, s=(0.0, 0.0, 0.0)):
        self.s = Tensor(s, requires_grad=True)

    def lambdas(self) -> tuple[float, float, float]:
        return tuple(float(math.exp(-v)) for v in self.s.data)

    def sigma2(self) -> np.ndarray:
        return np.exp(self.s.data.astype(np.float64))

    def parameters(self) -> list[Tensor]:
        return [self.s]

    def named_parameters(self):
        yield "s", self.s


@dataclass
class LossBreakdown:
    content: float
    style: float
    contrastive: float
    weighted_total: Tensor
    weights_snapshot: tuple[float, float, float]
    regularizer: float

    @property
    def total(self) -> float:
        return self.weighted_total.item()


def final_loss(weights: UncertaintyWeights, content, style, contrastive) -> LossBreakdown:
    """exp(-s1) L_co + exp(-s2) L_st + exp(-s3) L_ct + (s1 + s2 + s3) / 2."""
    comps = []
    for name, value in zip(UncertaintyWeights.names, (content, style, contrastive)):
        t = value if isinstance(value, Tensor) else Tensor(value)
        v = t.item()
        if not math.isfinite(v):
            raise NumericError(f"{name} loss is not finite ({v})")
        comps.append(t)
    s = weights.s
    dtype = comps[0].dtype
    if s.dtype != dtype:
        s = cast(s, dtype)
    total = None
    for i, comp in enumerate(comps):
        term = (-s[i]).exp() * comp
        total = term if total is None else total + term
    reg = 0.5 * s.sum()
    total = total + reg
    return LossBreakdown(
        content=comps[0].item(),
        style=comps[1].item(),
        contrastive=comps[2].item(),
        weighted_total=total,
        weights_snapshot=weights.lambdas(),
        regularizer=reg.item(),
    )

