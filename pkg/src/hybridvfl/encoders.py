"""Client-side encoders.

The image client runs a small CNN, the tabular client an MLP. Each has a
shared spine and two independent linear heads: one for the invariant
embedding, one for the modality-specific embedding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DimensionError, Tensor
from .nn import LayerParams

EMBED_DIM = 400


class Source(enum.IntEnum):
    SERVER = 0
    IMAGE_CLIENT = 1
    TABULAR_CLIENT = 2


class FeatureWidthError(ValueError):
    """Tabular input width differs from the fitted preprocessing."""


@dataclass
class EmbeddingBundle:
    """The two embeddings one client emits for one batch."""

    z_inv: Tensor
    z_spec: Tensor
    source: Source
    batch_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.z_inv.shape != self.z_spec.shape or self.z_inv.ndim != 2:
            raise DimensionError(
                f"bundle embeddings must share a [b, d] shape, got {list(self.z_inv.shape)} and {list(self.z_spec.shape)}"
            )
        if len(self.batch_ids) != self.z_inv.shape[0]:
            raise DimensionError(f"{len(self.batch_ids)} batch ids for {self.z_inv.shape[0]} embedding rows")


@dataclass
class ImageEncoderParams:
    conv1: LayerParams
    conv2: LayerParams
    fc: LayerParams
    heads: list[LayerParams]
    image_size: int

    def layers(self) -> list[LayerParams]:
        return [self.conv1, self.conv2, self.fc, *self.heads]


@dataclass
class TabularEncoderParams:
    fc1: LayerParams
    fc2: LayerParams
    heads: list[LayerParams]
    in_features: int

    def layers(self) -> list[LayerParams]:
        return [self.fc1, self.fc2, *self.heads]


def init_image_encoder(
    seed: int,
    image_size: int = 28,
    channels: tuple[int, int] = (8, 16),
    hidden: int = 128,
    out_dims: Sequence[int] = (EMBED_DIM, EMBED_DIM),
    name: str = "image",
) -> ImageEncoderParams:
    """``out_dims`` lists the head widths; two heads for dual output, one for a plain encoder."""
    if image_size % 4:
        raise nn.ConfigurationError(f"image size {image_size} must be divisible by 4 (two 2x2 pools)")
    c1, c2 = channels
    flat = c2 * (image_size // 4) ** 2
    head_names = ["inv", "spec"] if len(out_dims) == 2 else [f"out{i}" for i in range(len(out_dims))]
    return ImageEncoderParams(
        conv1=nn.init_conv(f"{name}.conv1", 3, c1, 3, seed),
        conv2=nn.init_conv(f"{name}.conv2", c1, c2, 3, seed),
        fc=nn.init_linear(f"{name}.fc", flat, hidden, seed),
        heads=[nn.init_linear(f"{name}.head_{h}", hidden, d, seed) for h, d in zip(head_names, out_dims)],
        image_size=image_size,
    )


def init_tabular_encoder(
    seed: int,
    in_features: int,
    hidden: int = 64,
    out_dims: Sequence[int] = (EMBED_DIM, EMBED_DIM),
    name: str = "tabular",
) -> TabularEncoderParams:
    head_names = ["inv", "spec"] if len(out_dims) == 2 else [f"out{i}" for i in range(len(out_dims))]
    return TabularEncoderParams(
        fc1=nn.init_linear(f"{name}.fc1", in_features, hidden, seed),
        fc2=nn.init_linear(f"{name}.fc2", hidden, hidden, seed),
        heads=[nn.init_linear(f"{name}.head_{h}", hidden, d, seed) for h, d in zip(head_names, out_dims)],
        in_features=in_features,
    )


def image_spine(x: Tensor, p: ImageEncoderParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"image encoder expects [b, 3, H, W] input, got {list(x.shape)}")
    # pixels arrive in [0, 1]; centring them keeps the flat background from dominating
    h = nn.max_pool2(ad.relu(nn.conv2d(ad.sub(x, 0.5), p.conv1, pad=1)))
    h = nn.max_pool2(ad.relu(nn.conv2d(h, p.conv2, pad=1)))
    return ad.relu(nn.linear(nn.flatten(h), p.fc))


def tabular_spine(x: Tensor, p: TabularEncoderParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.in_features:
        raise FeatureWidthError(f"tabular encoder fitted for {p.in_features} features, got input {list(x.shape)}")
    h = ad.relu(nn.linear(x, p.fc1))
    return ad.relu(nn.linear(h, p.fc2))


def encode_image_heads(x: Tensor, p: ImageEncoderParams) -> list[Tensor]:
    h = image_spine(x, p)
    return [nn.linear(h, head) for head in p.heads]


def encode_tabular_heads(x: Tensor, p: TabularEncoderParams) -> list[Tensor]:
    h = tabular_spine(x, p)
    return [nn.linear(h, head) for head in p.heads]


def encode_image(x_img: Tensor, p: ImageEncoderParams, batch_ids: Sequence[int] | None = None) -> EmbeddingBundle:
    z_inv, z_spec = encode_image_heads(x_img, p)
    ids = list(range(x_img.shape[0])) if batch_ids is None else list(batch_ids)
    return EmbeddingBundle(z_inv, z_spec, Source.IMAGE_CLIENT, ids)


def encode_tabular(x_tab: Tensor, p: TabularEncoderParams, batch_ids: Sequence[int] | None = None) -> EmbeddingBundle:
    z_inv, z_spec = encode_tabular_heads(x_tab, p)
    ids = list(range(x_tab.shape[0])) if batch_ids is None else list(batch_ids)
    return EmbeddingBundle(z_inv, z_spec, Source.TABULAR_CLIENT, ids)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
