"""Desk-scale vertical federated learning with disentangled encoders and transformer fusion."""

from .autodiff import Graph, Tensor, backward, finite_diff_check, vjp
from .data import SyntheticSpec, VerticalDataset, generate_synthetic, load_ham_style, split
from .encoders import EMBED_DIM, EmbeddingBundle, Source
from .fusion import FusionConfig
from .metrics import MetricsReport, confusion, macro_metrics
from .models import ModelConfig, Variant, variant_model

__version__ = "0.1.0"

__all__ = [
    "EMBED_DIM",
    "EmbeddingBundle",
    "FusionConfig",
    "Graph",
    "MetricsReport",
    "ModelConfig",
    "Source",
    "SyntheticSpec",
    "Tensor",
    "Variant",
    "VerticalDataset",
    "backward",
    "confusion",
    "finite_diff_check",
    "generate_synthetic",
    "load_ham_style",
    "macro_metrics",
    "split",
    "variant_model",
    "vjp",
]
