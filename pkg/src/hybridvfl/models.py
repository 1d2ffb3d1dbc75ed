"""The four comparison models and the pieces they share.

Every model is split the same way: an image-side encoder, an optional
tabular-side encoder, and a server head. Federated variants push the split
through the message protocol; centralised variants run it in one graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Graph, Tensor
from .encoders import (
    EMBED_DIM,
    EmbeddingBundle,
    Source,
    encode_image_heads,
    encode_tabular_heads,
    init_image_encoder,
    init_tabular_encoder,
)
from .fusion import FusionConfig, HybridHead, ServerOutput, check_aligned
from .nn import LayerParams


class Variant(str, enum.Enum):
    CENTRAL_IMAGE_ONLY = "CentralImageOnly"
    CENTRAL_MULTIMODAL = "CentralMultimodal"
    CONCAT_VFL = "ConcatVFL"
    HYBRID_VFL = "HybridVFL"

    @property
    def federated(self) -> bool:
        return self in (Variant.CONCAT_VFL, Variant.HYBRID_VFL)

    @classmethod
    def parse(cls, name: str) -> "Variant":
        for v in cls:
            if v.value.lower() == name.lower():
                return v
        raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}")


@dataclass(frozen=True)
class ModelConfig:
    seed: int
    tabular_width: int
    image_size: int = 28
    num_classes: int = 7
    lambda_cons: float = 0.1
    d_e: int = EMBED_DIM
    heads: int = 4
    blocks: int = 1
    ffn_mult: int = 4
    cnn_channels: tuple[int, int] = (8, 16)
    cnn_hidden: int = 128
    mlp_hidden: int = 64

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            lambda_cons=self.lambda_cons,
            heads=self.heads,
            blocks=self.blocks,
            num_classes=self.num_classes,
            d_e=self.d_e,
            embedding_budget=4 * self.d_e,
            ffn_mult=self.ffn_mult,
        )


class ClientModel:
    """One party's encoder, always emitting two [b, d_e] tensors.

    A dual-head encoder emits (z_inv, z_spec). A single-output encoder of
    width 2*d_e is cut into two halves so both variants share a wire layout.
    """

    def __init__(self, role: Source, params, dual: bool):
        self.role = role
        self.params = params
        self.dual = dual

    def layers(self) -> list[LayerParams]:
        return self.params.layers()

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.role is Source.IMAGE_CLIENT:
            outs = encode_image_heads(x, self.params)
        else:
            outs = encode_tabular_heads(x, self.params)
        if self.dual:
            return outs[0], outs[1]
        (z,) = outs
        half = z.shape[1] // 2
        return ad.take(z, 0, half, axis=1), ad.take(z, half, 2 * half, axis=1)

    def bundle(self, x: Tensor, batch_ids: Sequence[int]) -> EmbeddingBundle:
        a, b = self.encode(x)
        return EmbeddingBundle(a, b, self.role, list(batch_ids))


class ConcatHead:
    """Concatenate every received embedding and apply one softmax classifier."""

    def __init__(self, in_dim: int, num_classes: int, seed: int, name: str, use_tabular: bool = True):
        self.classifier = nn.init_linear(name, in_dim, num_classes, seed)
        self.use_tabular = use_tabular

    def layers(self) -> list[LayerParams]:
        return [self.classifier]

    def predict(self, b_img: EmbeddingBundle, b_tab: EmbeddingBundle | None) -> Tensor:
        parts = [b_img.z_inv, b_img.z_spec]
        if self.use_tabular:
            check_aligned(b_img, b_tab)
            parts += [b_tab.z_inv, b_tab.z_spec]
        return nn.softmax(nn.linear(ad.concat(parts, axis=1), self.classifier), axis=-1)

    def forward(self, b_img: EmbeddingBundle, b_tab: EmbeddingBundle | None, y) -> ServerOutput:
        y_hat = self.predict(b_img, b_tab)
        ce = nn.cross_entropy(y_hat, y)
        return ServerOutput(ce, y_hat, ce.item(), None)


@dataclass
class SplitModel:
    variant: Variant
    image: ClientModel
    tabular: ClientModel | None
    head: HybridHead | ConcatHead

    def layers(self) -> list[LayerParams]:
        out = list(self.image.layers())
        if self.tabular is not None:
            out += self.tabular.layers()
        return out + list(self.head.layers())

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers():
            out.update(layer.state())
        return out

    def forward(self, x_img: np.ndarray, x_tab: np.ndarray | None, y: np.ndarray, ids: Sequence[int]) -> ServerOutput:
        """Whole pipeline in the currently active graph (or none)."""
        b_img = self.image.bundle(Tensor(x_img), ids)
        b_tab = self.tabular.bundle(Tensor(x_tab), ids) if self.tabular is not None else None
        return self.head.forward(b_img, b_tab, y)

    def predict_proba(self, x_img: np.ndarray, x_tab: np.ndarray | None, batch: int = 256) -> np.ndarray:
        rows = []
        for start in range(0, x_img.shape[0], batch):
            stop = start + batch
            ids = list(range(start, min(stop, x_img.shape[0])))
            b_img = self.image.bundle(Tensor(x_img[start:stop]), ids)
            b_tab = self.tabular.bundle(Tensor(x_tab[start:stop]), ids) if self.tabular is not None else None
            rows.append(self.head.predict(b_img, b_tab).data)
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.num_classes))

    @property
    def num_classes(self) -> int:
        if isinstance(self.head, HybridHead):
            return self.head.cfg.num_classes
        return self.head.classifier["W"].shape[1]

    def train_step(self, x_img, x_tab, y, ids, lr: float) -> ServerOutput:
        with Graph() as g:
            out = self.forward(x_img, x_tab, y, ids)
        grads = ad.backward(g, out.loss)
        nn.sgd_step(self.layers(), grads, lr)
        return out


def variant_model(variant: Variant | str, cfg: ModelConfig, compute_consistency: bool = True) -> SplitModel:
    """Assemble the parameters for one comparison model.

    Single-output encoders get width 2*d_e so every variant spends the same
    embedding budget.
    """
    variant = Variant.parse(variant) if isinstance(variant, str) else variant
    seed, d = cfg.seed, cfg.d_e
    img_kwargs = dict(image_size=cfg.image_size, channels=cfg.cnn_channels, hidden=cfg.cnn_hidden)

    if variant is Variant.HYBRID_VFL:
        image = ClientModel(Source.IMAGE_CLIENT, init_image_encoder(seed, out_dims=(d, d), **img_kwargs), dual=True)
        tab = ClientModel(
            Source.TABULAR_CLIENT,
            init_tabular_encoder(seed, cfg.tabular_width, hidden=cfg.mlp_hidden, out_dims=(d, d)),
            dual=True,
        )
        return SplitModel(variant, image, tab, HybridHead(cfg.fusion(), seed, compute_consistency))

    image = ClientModel(Source.IMAGE_CLIENT, init_image_encoder(seed, out_dims=(2 * d,), **img_kwargs), dual=False)
    if variant is Variant.CENTRAL_IMAGE_ONLY:
        head = ConcatHead(2 * d, cfg.num_classes, seed, "head.classifier", use_tabular=False)
        return SplitModel(variant, image, None, head)

    tab = ClientModel(
        Source.TABULAR_CLIENT,
        init_tabular_encoder(seed, cfg.tabular_width, hidden=cfg.mlp_hidden, out_dims=(2 * d,)),
        dual=False,
    )
    return SplitModel(variant, image, tab, ConcatHead(4 * d, cfg.num_classes, seed, "head.classifier"))
