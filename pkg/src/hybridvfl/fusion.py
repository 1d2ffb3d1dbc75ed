"""Server-side fusion model.

Invariant alignment with a cosine consistency loss, a four-token sequence
fed through transformer blocks, mean pooling, and a softmax classifier. The
training objective is cross-entropy plus ``lambda_cons`` times the
consistency term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import EMBED_DIM, EmbeddingBundle
from .nn import ConfigurationError, LayerParams, TransformerParams

TOKEN_ORDER = ("image.inv", "image.spec", "tabular.inv", "tabular.spec")


class AlignmentError(ValueError):
    """Client bundles do not describe the same samples in the same order."""


@dataclass(frozen=True)
class FusionConfig:
    lambda_cons: float = 0.1
    heads: int = 4
    blocks: int = 1
    num_classes: int = 7
    d_e: int = EMBED_DIM
    embedding_budget: int = 4 * EMBED_DIM
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.lambda_cons < 0:
            raise ConfigurationError(f"lambda_cons must be non-negative, got {self.lambda_cons}")
        if 4 * self.d_e != self.embedding_budget:
            raise ConfigurationError(
                f"four embeddings of width {self.d_e} do not fill the {self.embedding_budget}-dim budget"
            )
        if self.d_e % self.heads:
            raise ConfigurationError(f"d_e={self.d_e} is not divisible by heads={self.heads}")


@dataclass
class FusionParams:
    blocks: list[TransformerParams]
    classifier: LayerParams
    config: FusionConfig = field(default_factory=FusionConfig)

    def layers(self) -> list[LayerParams]:
        out: list[LayerParams] = []
        for block in self.blocks:
            out.extend(block.layers())
        out.append(self.classifier)
        return out


def init_fusion(cfg: FusionConfig, seed: int) -> FusionParams:
    blocks = [
        nn.init_transformer_block(f"fusion.block{i}", cfg.d_e, cfg.heads, seed, ffn_mult=cfg.ffn_mult)
        for i in range(cfg.blocks)
    ]
    classifier = nn.init_linear("fusion.classifier", cfg.d_e, cfg.num_classes, seed)
    return FusionParams(blocks, classifier, cfg)


def check_aligned(b_img: EmbeddingBundle, b_tab: EmbeddingBundle) -> None:
    if list(b_img.batch_ids) != list(b_tab.batch_ids):
        raise AlignmentError("image and tabular bundles carry different batch ids or orders")
    if b_img.z_inv.shape != b_tab.z_inv.shape:
        raise AlignmentError(f"bundle shapes differ: {list(b_img.z_inv.shape)} vs {list(b_tab.z_inv.shape)}")


def build_sequence(b_img: EmbeddingBundle, b_tab: EmbeddingBundle) -> Tensor:
    """Stack to [b, 4, d_e] in the fixed order image.inv, image.spec, tabular.inv, tabular.spec."""
    check_aligned(b_img, b_tab)
    return ad.stack([b_img.z_inv, b_img.z_spec, b_tab.z_inv, b_tab.z_spec], axis=1)


def consistency_loss(b_img: EmbeddingBundle, b_tab: EmbeddingBundle) -> Tensor:
    """Cosine consistency between the two invariant embeddings only."""
    check_aligned(b_img, b_tab)
    return nn.cosine_consistency(b_img.z_inv, b_tab.z_inv)


def fuse(s: Tensor, p: FusionParams) -> Tensor:
    h = s
    for block in p.blocks:
        h = nn.transformer_block(h, block)
    return nn.mean_pool(h)


def classify(z_fused: Tensor, p: FusionParams) -> Tensor:
    return nn.softmax(nn.linear(z_fused, p.classifier), axis=-1)


def total_loss(y_hat: Tensor, y, l_cons: Tensor | None, cfg: FusionConfig) -> Tensor:
    """Cross-entropy plus ``lambda_cons * l_cons``; ``l_cons=None`` skips the term entirely."""
    if cfg.lambda_cons < 0:
        raise ConfigurationError(f"lambda_cons must be non-negative, got {cfg.lambda_cons}")
    ce = nn.cross_entropy(y_hat, y)
    if l_cons is None:
        return ce
    return ad.add(ce, ad.mul(l_cons, cfg.lambda_cons))


@dataclass
class ServerOutput:
    loss: Tensor
    y_hat: Tensor
    cross_entropy: float
    consistency: float | None


class HybridHead:
    """Server half of the disentangled fusion model.

    ``compute_consistency=False`` drops the alignment term from the graph
    altogether, which is how the lambda=0 equivalence is checked.
    """

    variant = "HybridVFL"

    def __init__(self, cfg: FusionConfig, seed: int, compute_consistency: bool = True):
        self.cfg = cfg
        self.params = init_fusion(cfg, seed)
        self.compute_consistency = compute_consistency

    def layers(self) -> list[LayerParams]:
        return self.params.layers()

    def forward(self, b_img: EmbeddingBundle, b_tab: EmbeddingBundle, y) -> ServerOutput:
        l_cons = consistency_loss(b_img, b_tab) if self.compute_consistency else None
        y_hat = self.predict(b_img, b_tab)
        ce = nn.cross_entropy(y_hat, y)
        loss = ce if l_cons is None else ad.add(ce, ad.mul(l_cons, self.cfg.lambda_cons))
        return ServerOutput(loss, y_hat, ce.item(), None if l_cons is None else l_cons.item())

    def predict(self, b_img: EmbeddingBundle, b_tab: EmbeddingBundle) -> Tensor:
        return classify(fuse(build_sequence(b_img, b_tab), self.params), self.params)


def zero_residual_projections(p: FusionParams) -> None:
    for block in p.blocks:
        nn.zero_output_projections(block)


def predicted_classes(y_hat: Tensor) -> np.ndarray:
    return np.argmax(y_hat.data, axis=1)
