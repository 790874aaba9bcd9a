"""Translation-equivariant cross-attention neural field.

A field maps query coordinates to output values conditioned on a latent point
cloud ``{(p_j, c_j)}``.  Every term depends on the queries only through the
offsets ``x - p_j`` (Fourier-encoded) and the squared distances, which is what
makes the field equivariant under joint translation of queries and anchors.

The module exposes two layers of API.  The public functions
(:func:`enf_forward`, :func:`attention_weights`, :func:`value_fn`) take and
return plain numpy arrays.  The ``*_t`` functions operate on autodiff tensors
and are what the encoder/decoder training loops drive; they accept the
Fourier-encoded offsets precomputed by :func:`pair_features` because those are
constant with respect to every trainable quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray

ENF_WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_s", "w_b", "w_o")


@dataclass(frozen=True)
class LatentPointCloud:
    """Sample-specific latent representation: anchored positions + features."""

    positions: Array  # (N_lat, d)
    features: Array   # (N_lat, l_d)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        c = np.asarray(self.features, dtype=np.float64)
        if p.ndim != 2 or c.ndim != 2:
            raise ShapeError(f"latent cloud expects 2-D arrays, got {p.shape} and {c.shape}")
        if p.shape[0] != c.shape[0] or p.shape[0] < 1:
            raise ShapeError(f"positions {p.shape} and features {c.shape} disagree on latent count")
        if not np.all(np.isfinite(p)):
            raise NumericError("latent positions contain non-finite values")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "features", c)

    @property
    def n_latents(self) -> int:
        return self.positions.shape[0]

    def shifted(self, delta) -> "LatentPointCloud":
        return LatentPointCloud(self.positions + np.asarray(delta, dtype=np.float64), self.features)


@dataclass(frozen=True)
class EnfParams:
    """All matrices of one equivariant field plus its window and head count.

    ``fourier`` is sampled once at construction and never trained.  There are
    no bias vectors anywhere; every map is a pure matrix.
    """

    fourier: Array  # (d_gamma/2, d), rows are random frequencies
    w_q: Array      # (d_k, d_gamma)
    w_k: Array      # (d_k, feat_dim)
    w_v: Array      # (d_v, feat_dim)
    w_s: Array      # (d_v, d_gamma)
    w_b: Array      # (d_v, d_gamma)
    w_o: Array      # (n_out, d_v)
    sigma: float    # Gaussian window width; 0 disables the distance penalty
    heads: int

    def __post_init__(self):
        d_gamma = 2 * self.fourier.shape[0]
        d_k = self.w_q.shape[0]
        d_v = self.w_v.shape[0]
        feat = self.w_k.shape[1]
        if self.w_q.shape != (d_k, d_gamma):
            raise ShapeError(f"w_q shape {self.w_q.shape} != ({d_k}, {d_gamma})")
        if self.w_k.shape[0] != d_k:
            raise ShapeError("w_k rows must match w_q rows (d_k)")
        if self.w_v.shape != (d_v, feat):
            raise ShapeError("w_v must map the latent feature dim to d_v")
        if self.w_s.shape != (d_v, d_gamma) or self.w_b.shape != (d_v, d_gamma):
            raise ShapeError("w_s and w_b must be (d_v, d_gamma)")
        if self.w_o.shape[1] != d_v:
            raise ShapeError("w_o columns must match d_v")
        if self.heads < 1 or d_k % self.heads or d_v % self.heads:
            raise ConfigError(f"d_k={d_k} and d_v={d_v} must divide evenly into {self.heads} heads")
        if self.sigma < 0:
            raise ConfigError("Gaussian window sigma must be non-negative")

    @property
    def d_gamma(self) -> int:
        return 2 * self.fourier.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.w_k.shape[1]

    @property
    def n_out(self) -> int:
        return self.w_o.shape[0]

    def weights(self) -> dict[str, Array]:
        """The trainable matrices by name (excludes the frozen Fourier matrix)."""
        return {name: getattr(self, name) for name in ENF_WEIGHT_NAMES}

    def with_weights(self, weights: Mapping[str, Array]) -> "EnfParams":
        return replace(self, **{name: np.asarray(weights[name], dtype=np.float64) for name in ENF_WEIGHT_NAMES})


def make_enf_params(
    rng: np.random.Generator,
    *,
    d: int,
    feat_dim: int,
    n_out: int,
    d_k: int,
    d_v: int,
    d_gamma: int,
    heads: int,
    sigma: float,
    rff_sigma: float,
) -> EnfParams:
    """Sample a fresh field: frequencies from N(0, rff_sigma^2), weights 1/sqrt(fan_in)."""
    if d_gamma % 2:
        raise ConfigError(f"d_gamma must be even, got {d_gamma}")
    fourier = rng.normal(0.0, rff_sigma, size=(d_gamma // 2, d))

    def init(rows: int, cols: int) -> Array:
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    return EnfParams(
        fourier=fourier,
        w_q=init(d_k, d_gamma),
        w_k=init(d_k, feat_dim),
        w_v=init(d_v, feat_dim),
        w_s=init(d_v, d_gamma),
        w_b=init(d_v, d_gamma),
        w_o=init(n_out, d_v),
        sigma=sigma,
        heads=heads,
    )


def validate_queries(queries: Array, d: int | None = None) -> Array:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1:
        raise ShapeError(f"queries must be (M, d) with M >= 1, got {q.shape}")
    if d is not None and q.shape[1] != d:
        raise ShapeError(f"queries have spatial dim {q.shape[1]}, expected {d}")
    if not np.all(np.isfinite(q)):
        raise NumericError("queries contain non-finite coordinates")
    return q


def rff_encode(offsets: Array, fourier: Array) -> Array:
    """Fourier-feature encoding [cos(Wx), sin(Wx)] along the last axis."""
    proj = np.asarray(offsets, dtype=np.float64) @ fourier.T
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


def pair_features(queries: Array, positions: Array, fourier: Array) -> tuple[Array, Array]:
    """Per (query, anchor) pair: encoded offsets and squared distances.

    Both outputs are constant w.r.t. features and weights, so callers compute
    them once and reuse them across inner-loop steps.
    """
    offsets = queries[:, None, :] - positions[None, :, :]      # (M, N, d)
    dist2 = np.sum(offsets * offsets, axis=-1)                 # (M, N)
    return rff_encode(offsets, fourier), dist2


@dataclass(frozen=True)
class PairCache:
    """Feature-independent half of a field evaluation.

    Everything here depends on the (query, anchor) pairs and the weights but
    not on the latent features, so the inner loop computes it once and reuses
    it across all of its gradient steps.  The tensors stay on the autodiff
    graph: gradients still reach the weights through them.
    """

    queries_t: Tensor      # (M, N, H, d_k/H) projected offset encodings
    scale_t: Tensor        # (M, N, d_v)
    shift_t: Tensor        # (M, N, d_v)
    penalty: Tensor        # (M, N, 1) constant sigma * ||x - p||^2
    w_k_t: Tensor          # (feat_dim, d_k), pre-transposed
    w_v_t: Tensor          # (feat_dim, d_v)
    w_o_t: Tensor          # (d_v, n_out)
    m: int
    n: int
    heads: int


def enf_pair_cache(
    encoded: Array,
    dist2: Array,
    weights: Mapping[str, object],
    *,
    heads: int,
    sigma: float,
) -> PairCache:
    m, n, d_gamma = encoded.shape
    w = {name: ad.as_tensor(weights[name]) for name in ENF_WEIGHT_NAMES}
    d_k = w["w_q"].shape[0]
    d_v = w["w_v"].shape[0]
    flat = Tensor(encoded.reshape(m * n, d_gamma))
    queries_t = ad.reshape(ad.matmul(flat, ad.transpose(w["w_q"])), (m, n, heads, d_k // heads))
    scale_t = ad.reshape(ad.matmul(flat, ad.transpose(w["w_s"])), (m, n, d_v))
    shift_t = ad.reshape(ad.matmul(flat, ad.transpose(w["w_b"])), (m, n, d_v))
    return PairCache(
        queries_t=queries_t,
        scale_t=scale_t,
        shift_t=shift_t,
        penalty=Tensor(sigma * dist2[:, :, None]),
        w_k_t=ad.transpose(w["w_k"]),
        w_v_t=ad.transpose(w["w_v"]),
        w_o_t=ad.transpose(w["w_o"]),
        m=m,
        n=n,
        heads=heads,
    )


def attention_from_cache(cache: PairCache, feats: Tensor) -> Tensor:
    """Attention weights (M, N, H) for the cached pair set."""
    head_dim = cache.queries_t.shape[3]
    k = ad.reshape(ad.matmul(feats, cache.w_k_t), (1, cache.n, cache.heads, head_dim))
    scores = ad.mul(ad.tsum(ad.mul(cache.queries_t, k), axis=3), Tensor(1.0 / np.sqrt(head_dim)))
    return ad.softmax(ad.sub(scores, cache.penalty), axis=1)


def enf_forward_cached(cache: PairCache, feats) -> Tensor:
    """Feature-dependent half of the field: attention, modulation, pooling."""
    feats = ad.as_tensor(feats)
    m, n, heads = cache.m, cache.n, cache.heads
    d_v = cache.w_v_t.shape[1]
    att = attention_from_cache(cache, feats)
    modulated = ad.reshape(ad.matmul(feats, cache.w_v_t), (1, n, d_v))
    values = ad.add(ad.mul(modulated, cache.scale_t), cache.shift_t)   # (M, N, d_v)
    values = ad.reshape(values, (m, n, heads, d_v // heads))
    pooled = ad.tsum(ad.mul(values, ad.reshape(att, (m, n, heads, 1))), axis=1)
    return ad.matmul(ad.reshape(pooled, (m, d_v)), cache.w_o_t)


def enf_forward_t(
    encoded: Array,
    dist2: Array,
    feats,
    weights: Mapping[str, object],
    *,
    heads: int,
    sigma: float,
) -> Tensor:
    """Differentiable field evaluation from precomputed pair features.

    ``feats`` is (N, feat_dim); ``weights`` maps the six matrix names to
    tensors or arrays.  Returns (M, n_out).
    """
    cache = enf_pair_cache(encoded, dist2, weights, heads=heads, sigma=sigma)
    return enf_forward_cached(cache, feats)


def recon_loss_t(pred: Tensor, target) -> Tensor:
    """Per-sample reconstruction loss: mean over points of squared error norm."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = ad.sub(pred, target)
    return ad.mul(ad.squared_norm(diff), Tensor(1.0 / pred.shape[0]))


# ---------------------------------------------------------------------------
# Public numpy-facing operations
# ---------------------------------------------------------------------------

def attention_weights(queries: Array, z: LatentPointCloud, params: EnfParams) -> Array:
    """Attention of every query over every latent anchor, per head: (M, N, H)."""
    queries = validate_queries(queries, z.positions.shape[1])
    encoded, dist2 = pair_features(queries, z.positions, params.fourier)
    with ad.no_grad():
        cache = enf_pair_cache(encoded, dist2, params.weights(),
                               heads=params.heads, sigma=params.sigma)
        att = attention_from_cache(cache, Tensor(z.features))
    return att.data


def value_fn(encoded: Array, feature: Array, params: EnfParams) -> Array:
    """Value vector for one (encoded offset, latent feature) pair."""
    b = np.asarray(encoded, dtype=np.float64)
    c = np.asarray(feature, dtype=np.float64)
    if b.shape != (params.d_gamma,):
        raise ShapeError(f"encoded offset must be ({params.d_gamma},), got {b.shape}")
    if c.shape != (params.feat_dim,):
        raise ShapeError(f"latent feature must be ({params.feat_dim},), got {c.shape}")
    return (params.w_v @ c) * (params.w_s @ b) + params.w_b @ b


def enf_forward(z: LatentPointCloud, queries: Array, params: EnfParams) -> Array:
    """Evaluate the field at the queries: (M, n_out)."""
    queries = validate_queries(queries, z.positions.shape[1])
    if z.features.shape[1] != params.feat_dim:
        raise ShapeError(
            f"latent features have dim {z.features.shape[1]}, field expects {params.feat_dim}")
    encoded, dist2 = pair_features(queries, z.positions, params.fourier)
    with ad.no_grad():
        out = enf_forward_t(encoded, dist2, Tensor(z.features), params.weights(),
                            heads=params.heads, sigma=params.sigma)
    values = out.data
    bad = ~np.all(np.isfinite(values), axis=1)
    if np.any(bad):
        raise NumericError(f"non-finite field output at query index {int(np.argmax(bad))}")
    return values
