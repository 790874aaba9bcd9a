"""Output decoder: condition latents on global parameters, mix them with
residual self-attention, then decode equivariantly to the physical field.

The self-attention blocks see features only; positions never enter them, so
the translation equivariance of the field is preserved for any block count.
Their cost depends on the number of anchors alone, never on the mesh size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError
from .field import EnfParams, LatentPointCloud, enf_forward_t, pair_features, validate_queries

Array = np.ndarray

SA_WEIGHT_NAMES = ("w_q", "w_k", "w_v")


@dataclass(frozen=True)
class ConditionedLatents:
    """Encoder latents with the global parameter vector appended to each row."""

    positions: Array  # (N_lat, d)
    features: Array   # (N_lat, l_d + l_mu)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        c = np.asarray(self.features, dtype=np.float64)
        if p.shape[0] != c.shape[0]:
            raise ShapeError("positions and features disagree on latent count")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "features", c)


@dataclass(frozen=True)
class SelfAttentionParams:
    """One residual block: square projections over the conditioned feature dim."""

    w_q: Array
    w_k: Array
    w_v: Array

    def __post_init__(self):
        dim = self.w_q.shape[1]
        for name in SA_WEIGHT_NAMES:
            w = getattr(self, name)
            if w.shape != (dim, dim):
                raise ShapeError(f"{name} must be square ({dim}, {dim}), got {w.shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    def weights(self) -> dict[str, Array]:
        return {name: getattr(self, name) for name in SA_WEIGHT_NAMES}


@dataclass(frozen=True)
class DecoderParams:
    """Self-attention block stack plus the output field."""

    blocks: tuple[SelfAttentionParams, ...]
    field: EnfParams

    def __post_init__(self):
        for i, block in enumerate(self.blocks):
            if block.dim != self.field.feat_dim:
                raise ShapeError(
                    f"block {i} dim {block.dim} != field feature dim {self.field.feat_dim}")

    def weights(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for i, block in enumerate(self.blocks):
            for name, w in block.weights().items():
                out[f"sa{i}.{name}"] = w
        for name, w in self.field.weights().items():
            out[f"field.{name}"] = w
        return out

    def with_weights(self, weights: Mapping[str, Array]) -> "DecoderParams":
        blocks = tuple(
            SelfAttentionParams(
                **{name: np.asarray(weights[f"sa{i}.{name}"], dtype=np.float64)
                   for name in SA_WEIGHT_NAMES})
            for i in range(len(self.blocks))
        )
        field = self.field.with_weights(
            {name: weights[f"field.{name}"] for name in self.field.weights()})
        return DecoderParams(blocks=blocks, field=field)


def make_decoder_params(config, rng: np.random.Generator) -> DecoderParams:
    from .model import build_decoder_field  # local import avoids a cycle

    dim = config.decoder_feat_dim
    scale = 1.0 / np.sqrt(dim)
    blocks = tuple(
        SelfAttentionParams(
            w_q=rng.normal(0.0, scale, size=(dim, dim)),
            w_k=rng.normal(0.0, scale, size=(dim, dim)),
            w_v=rng.normal(0.0, scale, size=(dim, dim)),
        )
        for _ in range(config.attention_blocks)
    )
    return DecoderParams(blocks=blocks, field=build_decoder_field(config, rng))


def condition_latents(z: LatentPointCloud, mu: Array) -> ConditionedLatents:
    """Append the (possibly empty) global parameter vector to every feature row."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    tiled = np.tile(mu, (z.n_latents, 1))
    return ConditionedLatents(
        positions=z.positions,
        features=np.concatenate([z.features, tiled], axis=1),
    )


def self_attention_block_t(feats: Tensor, w_q, w_k, w_v) -> Tensor:
    """Residual set self-attention exactly as written: no positions, no biases."""
    w_q, w_k, w_v = (ad.as_tensor(w) for w in (w_q, w_k, w_v))
    dim = w_q.shape[1]
    q = ad.matmul(feats, ad.transpose(w_q))
    k = ad.matmul(feats, ad.transpose(w_k))
    att = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), Tensor(1.0 / np.sqrt(dim))), axis=1)
    return ad.add(feats, ad.matmul(att, ad.matmul(feats, ad.transpose(w_v))))


def self_attention_block(features: Array, block: SelfAttentionParams) -> Array:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != block.dim:
        raise ShapeError(f"features must be (N, {block.dim}), got {features.shape}")
    with ad.no_grad():
        out = self_attention_block_t(Tensor(features), block.w_q, block.w_k, block.w_v)
    return out.data


def self_attention_op_count(n_latents: int, dim: int) -> int:
    """Multiply-add count of one block; a function of the anchor set only."""
    projections = 3 * n_latents * dim * dim
    scores = n_latents * n_latents * dim
    pooling = n_latents * n_latents * dim
    return 2 * (projections + scores + pooling)


def decode_t(
    encoded: Array,
    dist2: Array,
    feats,
    weights: Mapping[str, object],
    *,
    n_blocks: int,
    heads: int,
    sigma: float,
) -> Tensor:
    """Differentiable decode from precomputed pair features and named weights."""
    feats = ad.as_tensor(feats)
    for i in range(n_blocks):
        feats = self_attention_block_t(
            feats, weights[f"sa{i}.w_q"], weights[f"sa{i}.w_k"], weights[f"sa{i}.w_v"])
    field_weights = {name: weights[f"field.{name}"] for name in ("w_q", "w_k", "w_v", "w_s", "w_b", "w_o")}
    return enf_forward_t(encoded, dist2, feats, field_weights, heads=heads, sigma=sigma)


def decode(latents: ConditionedLatents, queries: Array, params: DecoderParams) -> Array:
    """Evaluate the output field at the queries: (M, n_u)."""
    queries = validate_queries(queries, latents.positions.shape[1])
    if latents.features.shape[1] != params.field.feat_dim:
        raise ShapeError(
            f"conditioned features have dim {latents.features.shape[1]}, "
            f"decoder expects {params.field.feat_dim}")
    encoded, dist2 = pair_features(queries, latents.positions, params.field.fourier)
    with ad.no_grad():
        out = decode_t(encoded, dist2, Tensor(latents.features), params.weights(),
                       n_blocks=len(params.blocks), heads=params.field.heads,
                       sigma=params.field.sigma)
    values = out.data
    bad = ~np.all(np.isfinite(values), axis=1)
    if np.any(bad):
        raise NumericError(f"non-finite decode output at query index {int(np.argmax(bad))}")
    return values
