"""Meta-learned geometry encoder.

Encoding a sample means fitting the latent features by a handful of plain
gradient steps on the input-reconstruction loss, starting from zero, while the
anchor positions stay pinned to a fixed uniform grid.  The shared field
weights are meta-trained so that those few steps suffice.

In second-order mode the gradient steps themselves stay on the autodiff graph,
so an outer loss evaluated at the fitted features can be differentiated with
respect to the shared weights through the whole loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EncodeError, ShapeError
from .field import (
    EnfParams,
    LatentPointCloud,
    enf_forward_cached,
    enf_pair_cache,
    pair_features,
    recon_loss_t,
)

Array = np.ndarray


@dataclass(frozen=True)
class EncoderState:
    """Shared field weights plus the fixed anchor grid and inner-loop settings."""

    params: EnfParams
    positions: Array   # (N_lat, d), never mutated by encoding
    inner_steps: int   # K
    inner_lr: float    # alpha

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ShapeError(f"positions must be (N_lat, d), got {p.shape}")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if self.inner_lr <= 0:
            raise ConfigError("inner_lr must be positive")
        object.__setattr__(self, "positions", p)

    @property
    def latent_dim(self) -> int:
        return self.params.feat_dim


@dataclass(frozen=True)
class InnerLoopTrace:
    """Input-reconstruction loss before the first step and after each step."""

    losses: tuple[float, ...]  # length K + 1

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.losses):
            raise EncodeError(len(self.losses) - 1, "non-finite loss in inner-loop trace")

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % k for k in range(2, int(np.sqrt(n)) + 1))


def _centers(lo: float, hi: float, count: int) -> Array:
    i = np.arange(count, dtype=np.float64)
    return lo + (hi - lo) * (2 * i + 1) / (2 * count)


def init_latent_positions(bbox, n_latents: int) -> Array:
    """Anchor grid of cell centers covering the box, as square as N allows.

    For d=2 the factorisation rows x cols = N with minimal |rows - cols| is
    used; a prime N > 3 only admits the degenerate 1 x N row, which is
    accepted with a warning.  The grid is deterministic: row-major, x fastest.
    """
    if n_latents < 1:
        raise ConfigError("need at least one latent anchor")
    bbox = tuple((float(lo), float(hi)) for lo, hi in bbox)
    for lo, hi in bbox:
        if not lo < hi:
            raise ConfigError(f"degenerate bbox axis ({lo}, {hi})")
    d = len(bbox)
    if d == 1:
        return _centers(*bbox[0], n_latents)[:, None]
    if d != 2:
        raise ConfigError(f"latent grids are defined for d in (1, 2), got d={d}")

    rows = max(k for k in range(1, int(np.sqrt(n_latents)) + 1) if n_latents % k == 0)
    cols = n_latents // rows
    if rows == 1 and _is_prime(n_latents) and n_latents > 3:
        warnings.warn(
            f"latent count {n_latents} is prime; falling back to a 1 x {n_latents} row grid",
            stacklevel=2,
        )
    xs = _centers(*bbox[0], cols)
    ys = _centers(*bbox[1], rows)
    grid = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)  # (rows, cols, 2)
    return grid.reshape(n_latents, 2)


def inner_loop_t(
    encoded: Array,
    dist2: Array,
    target: Array,
    weights: Mapping[str, object],
    *,
    n_latents: int,
    latent_dim: int,
    heads: int,
    sigma: float,
    steps: int,
    lr: float,
    second_order: bool,
) -> tuple[Tensor, list[Tensor]]:
    """Fit latent features by ``steps`` gradient steps on the recon loss.

    Returns the fitted features (graph-linked to ``weights`` when
    ``second_order``) and the K+1 per-step loss tensors.
    """
    target_t = ad.as_tensor(target)
    cache = enf_pair_cache(encoded, dist2, weights, heads=heads, sigma=sigma)
    feats = Tensor(np.zeros((n_latents, latent_dim)))
    losses: list[Tensor] = []
    for step in range(steps):
        pred = enf_forward_cached(cache, feats)
        loss = recon_loss_t(pred, target_t)
        if not np.isfinite(loss.data):
            raise EncodeError(step, f"inner loop diverged at step {step}: loss={float(loss.data)!r}")
        losses.append(loss)
        (grad,) = ad.backward(loss, [feats], create_graph=second_order)
        if second_order:
            feats = ad.sub(feats, ad.mul(Tensor(lr), grad))
        else:
            feats = Tensor(feats.data - lr * grad.data)
    pred = enf_forward_cached(cache, feats)
    final = recon_loss_t(pred, target_t)
    if not np.isfinite(final.data):
        raise EncodeError(steps, f"inner loop diverged at final evaluation: loss={float(final.data)!r}")
    losses.append(final)
    return feats, losses


def encode(sample, state: EncoderState, *, second_order: bool = False) -> tuple[LatentPointCloud, InnerLoopTrace]:
    """Fit a latent point cloud to the sample's input field.

    ``sample`` needs ``coords`` (N, d) and ``a`` (N, n_a); the full point set
    is used as-is (downsampling is the trainer's business).  Positions are
    returned bit-identical to the state's template.
    """
    coords = np.asarray(sample.coords, dtype=np.float64)
    target = np.asarray(sample.a, dtype=np.float64)
    if coords.shape[1] != state.positions.shape[1]:
        raise ShapeError(
            f"sample dim {coords.shape[1]} != latent dim {state.positions.shape[1]}")
    if target.shape[1] != state.params.n_out:
        raise ShapeError(f"input field has {target.shape[1]} channels, field expects {state.params.n_out}")
    encoded, dist2 = pair_features(coords, state.positions, state.params.fourier)
    feats, losses = inner_loop_t(
        encoded, dist2, target, state.params.weights(),
        n_latents=state.positions.shape[0],
        latent_dim=state.latent_dim,
        heads=state.params.heads,
        sigma=state.params.sigma,
        steps=state.inner_steps,
        lr=state.inner_lr,
        second_order=second_order,
    )
    cloud = LatentPointCloud(state.positions.copy(), feats.data.copy())
    return cloud, InnerLoopTrace(tuple(float(l.data) for l in losses))


def encode_global(sample, state: EncoderState) -> tuple[LatentPointCloud, InnerLoopTrace]:
    """Global-latent baseline: a single anchor and no distance penalty."""
    if state.positions.shape[0] != 1:
        raise ConfigError("global encoding requires exactly one latent anchor")
    if state.params.sigma != 0.0:
        raise ConfigError("global encoding requires sigma = 0 (distance penalty disabled)")
    return encode(sample, state)
