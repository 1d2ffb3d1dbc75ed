"""Layers, losses and the SGD update used by every model in the package."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

LOG_CLAMP = 1e-12
NORM_CLAMP = 1e-12


class ConfigurationError(ValueError):
    """A layer or model was configured with inconsistent sizes."""


class LabelValidationError(ValueError):
    """Labels are not one-hot rows."""


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, layer name) so layers initialise independently."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class LayerParams:
    """Named trainable tensors of one layer.

    Shapes are fixed at construction; training mutates ``.data`` in place.
    """

    name: str
    seed: int
    weights: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v.data.copy() for k, v in self.weights.items()}


def _uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_linear(name: str, fan_in: int, fan_out: int, seed: int) -> LayerParams:
    """Weights and bias both uniform in +-sqrt(1/fan_in)."""
    rng = layer_rng(seed, name)
    w = _uniform(rng, fan_in, (fan_in, fan_out))
    b = _uniform(rng, fan_in, (fan_out,))
    return LayerParams(name, seed, {"W": w, "b": b})


def init_conv(name: str, c_in: int, c_out: int, k: int, seed: int) -> LayerParams:
    rng = layer_rng(seed, name)
    fan_in = c_in * k * k
    return LayerParams(
        name, seed, {"W": _uniform(rng, fan_in, (c_out, c_in, k, k)), "b": _uniform(rng, fan_in, (c_out,))}
    )


def init_layer_norm(name: str, d: int, seed: int) -> LayerParams:
    return LayerParams(
        name, seed, {"gain": Tensor(np.ones(d), requires_grad=True), "bias": Tensor(np.zeros(d), requires_grad=True)}
    )


# ----------------------------------------------------------------------------
# layers


def linear(x: Tensor, p: LayerParams) -> Tensor:
    w = p["W"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{p.name}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return ad.affine(x, w, p["b"])


def conv2d(x: Tensor, p: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    try:
        return ad.conv2d_op(x, p["W"], p["b"], stride=stride, pad=pad)
    except ContractError as exc:
        raise ConfigurationError(str(exc)) from None


def max_pool2(x: Tensor) -> Tensor:
    try:
        return ad.max_pool2_op(x)
    except ContractError as exc:
        raise ConfigurationError(str(exc)) from None


def flatten(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], -1))


def layer_norm(x: Tensor, p: LayerParams, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm_op(x, p["gain"], p["bias"], eps=eps)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    return ad.softmax(x, axis=axis)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(dk)) V over the last two axes."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(
            f"attention shape mismatch: Q {list(q.shape)}, K {list(k.shape)}, V {list(v.shape)}"
        )
    dk = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ad.matmul(q, ad.transpose(k, axes)) * (1.0 / math.sqrt(dk))
    return ad.matmul(softmax(scores, axis=-1), v)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Attention weight matrix only, for inspection."""
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def init_mhsa(name: str, d: int, seed: int) -> dict[str, LayerParams]:
    return {key: init_linear(f"{name}.{key}", d, d, seed) for key in ("q", "k", "v", "o")}


def multi_head_self_attention(s: Tensor, p: Mapping[str, LayerParams], heads: int) -> Tensor:
    b, n, d = s.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(s, p["q"]))
    k = split(linear(s, p["k"]))
    v = split(linear(s, p["v"]))
    mixed = attention(q, k, v)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    return linear(merged, p["o"])


@dataclass
class TransformerParams:
    ln1: LayerParams
    attn: dict[str, LayerParams]
    ln2: LayerParams
    ff1: LayerParams
    ff2: LayerParams
    heads: int

    def layers(self) -> list[LayerParams]:
        return [self.ln1, *self.attn.values(), self.ln2, self.ff1, self.ff2]


def init_transformer_block(name: str, d: int, heads: int, seed: int, ffn_mult: int = 4) -> TransformerParams:
    if d % heads:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    return TransformerParams(
        ln1=init_layer_norm(f"{name}.ln1", d, seed),
        attn=init_mhsa(f"{name}.attn", d, seed),
        ln2=init_layer_norm(f"{name}.ln2", d, seed),
        ff1=init_linear(f"{name}.ff1", d, ffn_mult * d, seed),
        ff2=init_linear(f"{name}.ff2", ffn_mult * d, d, seed),
        heads=heads,
    )


def zero_output_projections(p: TransformerParams) -> None:
    for layer in (p.attn["o"], p.ff2):
        for t in layer.tensors():
            t.data[...] = 0.0


def transformer_block(s: Tensor, p: TransformerParams) -> Tensor:
    """Pre-norm residual block: s + MHSA(LN(s)), then + FFN(LN(.))."""
    h = ad.add(s, multi_head_self_attention(layer_norm(s, p.ln1), p.attn, p.heads))
    ff = linear(ad.relu(linear(layer_norm(h, p.ln2), p.ff1)), p.ff2)
    return ad.add(h, ff)


def mean_pool(s: Tensor) -> Tensor:
    if s.shape[1] < 1:
        raise DimensionError("mean_pool needs at least one token")
    return ad.mean(s, axis=1)


# ----------------------------------------------------------------------------
# losses


def validate_one_hot(y: np.ndarray) -> None:
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise LabelValidationError("labels must be one-hot rows")


def cross_entropy(y_hat: Tensor, y: Tensor | np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of probability rows against one-hot rows."""
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if yd.shape != y_hat.shape:
        raise DimensionError(f"cross_entropy: predictions {list(y_hat.shape)} vs labels {list(yd.shape)}")
    validate_one_hot(yd)
    n = y_hat.shape[0]
    picked = ad.sum_(ad.mul(ad.log(y_hat, clamp=LOG_CLAMP), Tensor(yd)))
    return ad.mul(picked, -1.0 / n)


class ClampCounter:
    """Counts rows whose norm hit the clamp in cosine_consistency."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> None:
        self.count = 0


zero_norm_warnings = ClampCounter()


def cosine_consistency(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Batch mean of ``1 - cos(z_a[i], z_b[i])``; always within [0, 2]."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise DimensionError(f"cosine_consistency needs equal [b,d] shapes, got {list(z_a.shape)} and {list(z_b.shape)}")
    sq_a = ad.sum_(ad.mul(z_a, z_a), axis=1)
    sq_b = ad.sum_(ad.mul(z_b, z_b), axis=1)
    floor = NORM_CLAMP * NORM_CLAMP
    zero_norm_warnings.count += int(np.sum(sq_a.data <= floor) + np.sum(sq_b.data <= floor))
    norm_a = ad.sqrt(ad.maximum(sq_a, floor))
    norm_b = ad.sqrt(ad.maximum(sq_b, floor))
    dot = ad.sum_(ad.mul(z_a, z_b), axis=1)
    cos = ad.clip(ad.div(dot, ad.mul(norm_a, norm_b)), -1.0, 1.0)
    return ad.mean(ad.add(ad.neg(cos), 1.0))


# ----------------------------------------------------------------------------
# optimiser


def parameters(layers: Iterable[LayerParams]) -> list[Tensor]:
    return [t for layer in layers for t in layer.tensors()]


def sgd_step(layers: Sequence[LayerParams], grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
    """In-place ``w -= lr * g`` for every weight of every layer."""
    params = parameters(layers)
    missing = [t for t in params if t not in grads]
    if missing:
        raise ContractError(f"gradient table is missing {len(missing)} of {len(params)} parameters")
    for t in params:
        g = grads[t]
        if g.shape != t.shape:
            raise ContractError(f"gradient shape {list(g.shape)} does not match parameter {list(t.shape)}")
        t.data -= lr * g
