"""Frozen multi-scale feature backbone used for losses and rewards.

The default backbone is a seeded stack of conv+relu blocks with orthogonal
weights (16/32/64/128 channels, stride 2 between taps).  Real weights can be
supplied through the checkpoint container as long as shapes match.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .container import read_container, write_container
from .errors import DimensionError, FormatError
from .nn import Conv2d, Module
from .tensor import Tensor

DEFAULT_CHANNELS = (16, 32, 64, 128)
CONTENT_TAP = 2  # zero-based: the second-deepest of four taps


class FeatureBackbone(Module):
    def __init__(
        self,
        seed: int = 0,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        kernel: int = 3,
        strides: Sequence[int] | None = None,
    ):
        if len(channels) < 2:
            raise ValueError("backbone needs at least two taps")
        rng = np.random.default_rng(seed)
        strides = tuple(strides) if strides is not None else (1,) + (2,) * (len(channels) - 1)
        if len(strides) != len(channels):
            raise ValueError("one stride per tap required")
        self.channels = tuple(channels)
        self.strides = strides
        self.kernel = kernel
        self.layers: list[Conv2d] = []
        cin = 3
        for i, (cout, s) in enumerate(zip(channels, strides)):
            layer = Conv2d(cin, cout, kernel, rng, stride=s, init="orthogonal", trainable=False)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
            cin = cout
        self.tap_indices = tuple(range(len(channels)))
        self.frozen = True

    @property
    def num_taps(self) -> int:
        return len(self.tap_indices)

    def min_size(self) -> int:
        return int(np.prod(self.strides))

    def forward(self, images: Tensor, upto: int | None = None) -> list[Tensor]:
        return extract(self, images, upto)


def extract(backbone: FeatureBackbone, images: Tensor, upto: int | None = None) -> list[Tensor]:
    """Activations at every tap (or taps ``0..upto``), shallow to deep."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected N x 3 x H x W images, got {images.shape}")
    h, w = images.shape[2:]
    need = backbone.min_size()
    if h < need or w < need:
        raise DimensionError(f"image {h}x{w} too small for the deepest tap (needs >= {need})")
    last = backbone.num_taps - 1 if upto is None else upto
    feats = []
    x = images
    for i, layer in enumerate(backbone.layers[: last + 1]):
        x = layer(x).relu()
        if i in backbone.tap_indices:
            feats.append(x)
    return feats


def save_backbone(backbone: FeatureBackbone, path: str | os.PathLike) -> None:
    write_container(path, {f"backbone.{k}": v for k, v in backbone.state_dict().items()})


def load_backbone(source: int | str | os.PathLike) -> FeatureBackbone:
    """Build the seeded default backbone, or load its weights from a container."""
    if isinstance(source, (int, np.integer)):
        return FeatureBackbone(seed=int(source))
    arrays = read_container(source)
    backbone = FeatureBackbone(seed=0)
    try:
        backbone.load_state_dict(arrays, prefix="backbone.")
    except FormatError as exc:
        raise FormatError(f"{source}: {exc}") from None
    return backbone
