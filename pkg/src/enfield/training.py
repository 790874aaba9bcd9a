"""Outer-loop training for the encoder and the decoder.

Encoder training: every epoch draws a fresh random subset of each sample's
points, runs the K-step inner loop from zero features, and updates the shared
weights from the gradient of the final reconstruction loss (through the inner
loop in second-order mode, holding the fitted features fixed in first-order
mode).  Decoder training freezes the encoder, re-fits latents per epoch (or
once, when caching is enabled), conditions them on the standardised global
parameters and regresses the output field.

All training runs in float64; checkpoints quantise to float32 on save.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, build_checkpoint
from .data import FieldSample, downsample
from .decoder import DecoderParams, decode_t, make_decoder_params
from .encoder import EncoderState, init_latent_positions, inner_loop_t
from .errors import ConfigError, NumericError, ShapeError
from .field import EnfParams, pair_features, recon_loss_t
from .model import ModelConfig, build_encoder_field

Array = np.ndarray

DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# Losses and normalisation
# ---------------------------------------------------------------------------

def loss_recon(pred: Array, target: Array) -> float:
    """Mean over points of the squared error norm: (1/M) sum ||t - p||^2."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = target - pred
    return float(np.sum(diff * diff) / pred.shape[0])


@dataclass(frozen=True)
class NormStats:
    """Training-split statistics: output standardisation, coordinate min-max,
    global-parameter standardisation."""

    out_mean: Array
    out_std: Array
    coord_min: Array
    coord_max: Array
    mu_mean: Array
    mu_std: Array

    def __post_init__(self):
        for name in ("out_mean", "out_std", "coord_min", "coord_max", "mu_mean", "mu_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.out_std <= 0) or np.any(self.mu_std <= 0):
            raise ConfigError("zero-variance channel: standard deviation must be positive")
        if np.any(self.coord_min >= self.coord_max):
            raise ConfigError("degenerate coordinate range: min must be < max")


def compute_norm_stats(samples: Sequence[FieldSample]) -> NormStats:
    """Statistics over the training split only."""
    if not samples:
        raise ConfigError("cannot compute statistics from an empty training split")
    coords = np.concatenate([s.coords for s in samples])
    outputs = np.concatenate([s.u for s in samples])
    mus = np.stack([s.mu for s in samples]) if samples[0].mu.size else np.zeros((len(samples), 0))
    out_std = outputs.std(axis=0)
    mu_std = mus.std(axis=0) if mus.size else np.zeros(0)
    if np.any(out_std <= 0):
        raise ConfigError("output channel with zero variance cannot be standardised")
    if mus.size and np.any(mu_std <= 0):
        # A deliberately constant parameter sweep is fine; keep the values as-is.
        mu_std = np.where(mu_std > 0, mu_std, 1.0)
    return NormStats(
        out_mean=outputs.mean(axis=0),
        out_std=out_std,
        coord_min=coords.min(axis=0),
        coord_max=coords.max(axis=0),
        mu_mean=mus.mean(axis=0) if mus.size else np.zeros(0),
        mu_std=mu_std if mus.size else np.ones(0),
    )


def normalize_coords(coords: Array, stats: NormStats) -> Array:
    span = stats.coord_max - stats.coord_min
    return 2.0 * (coords - stats.coord_min) / span - 1.0


def normalize_mu(mu: Array, stats: NormStats) -> Array:
    if mu.size == 0:
        return mu
    return (mu - stats.mu_mean) / stats.mu_std


def normalize(sample: FieldSample, stats: NormStats) -> FieldSample:
    """Coordinates to [-1, 1], outputs and mu standardised; input field untouched."""
    return FieldSample(
        coords=normalize_coords(sample.coords, stats),
        a=sample.a,
        u=(sample.u - stats.out_mean) / stats.out_std,
        mu=normalize_mu(sample.mu, stats),
        mask=sample.mask,
    )


def denormalize(pred: Array, stats: NormStats) -> Array:
    """Map standardised output-field predictions back to physical units."""
    return np.asarray(pred, dtype=np.float64) * stats.out_std + stats.out_mean


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Array], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            update = (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)
            self.params[key] = self.params[key] - self.lr * update


class Sgd:
    def __init__(self, params: dict[str, Array], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, Array]) -> None:
        for key, g in grads.items():
            self.params[key] = self.params[key] - self.lr * g


def make_optimizer(name: str, params: dict[str, Array], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return Sgd(params, lr)
    raise ConfigError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")


# ---------------------------------------------------------------------------
# Training configuration and loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3                # outer learning rate
    batch_size: int = 8
    downsample: int = 512           # points per sample per epoch
    seed: int = 0
    mode: str = "second-order"      # or "first-order"
    optimizer: str = "adam"
    cache_latents: bool = False     # decoder training: fit latents once, reuse

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.downsample < 1:
            raise ConfigError("epochs, batch_size and downsample must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.mode not in ("second-order", "first-order"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: list[float]
    seconds: float
    diverged_at: int | None = None  # epoch index if training was aborted


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, epoch)))


def _check_epoch_loss(loss: float, epoch: int) -> bool:
    return bool(np.isfinite(loss)) and loss <= DIVERGENCE_LIMIT


def train_encoder(
    train_samples: Sequence[FieldSample],
    config: ModelConfig,
    train_config: TrainConfig,
    stats: NormStats | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Meta-train the shared encoder weights on the input fields.

    Returns a checkpoint of kind "encoder" (weights, anchor grid, statistics)
    plus the per-epoch training loss curve.
    """
    if not train_samples:
        raise ConfigError("empty training split")
    started = time.perf_counter()
    if stats is None:
        stats = compute_norm_stats(train_samples)
    normalized = [normalize(s, stats) for s in train_samples]

    rng = np.random.default_rng(np.random.SeedSequence((train_config.seed, 0)))
    enc_field = build_encoder_field(config, rng)
    positions = init_latent_positions(config.latent_bbox, config.n_latents)
    weights = {k: v.copy() for k, v in enc_field.weights().items()}
    optimizer = make_optimizer(train_config.optimizer, weights, train_config.lr)
    second_order = train_config.mode == "second-order"

    def snapshot() -> Checkpoint:
        return build_checkpoint(
            config, stats, positions, enc_field.with_weights(weights),
            extra_metadata={"train.seed": str(train_config.seed)})

    curve: list[float] = []
    last_good = snapshot()
    for epoch in range(train_config.epochs):
        ds_rng = _epoch_rng(train_config.seed, epoch, 1)
        order = _epoch_rng(train_config.seed, epoch, 2).permutation(len(normalized))
        epoch_losses: list[float] = []
        try:
            for start in range(0, len(order), train_config.batch_size):
                batch = order[start:start + train_config.batch_size]
                leaves = {k: Tensor(v) for k, v in weights.items()}
                grads = {k: np.zeros_like(v) for k, v in weights.items()}
                for index in batch:
                    sample = downsample(normalized[index], train_config.downsample, ds_rng)
                    encoded, dist2 = pair_features(sample.coords, positions, enc_field.fourier)
                    _, losses = inner_loop_t(
                        encoded, dist2, sample.a, leaves,
                        n_latents=config.n_latents, latent_dim=config.latent_dim,
                        heads=config.heads, sigma=config.sigma,
                        steps=config.inner_steps, lr=config.inner_lr,
                        second_order=second_order,
                    )
                    outer = losses[-1]
                    epoch_losses.append(float(outer.data))
                    for key, g in zip(weights, ad.backward(outer, list(leaves.values()))):
                        grads[key] += g.data / len(batch)
                optimizer.step(grads)
        except NumericError:
            return TrainResult(last_good, curve, time.perf_counter() - started, diverged_at=epoch)
        epoch_loss = float(np.mean(epoch_losses))
        curve.append(epoch_loss)
        if progress:
            progress(epoch, epoch_loss)
        if not _check_epoch_loss(epoch_loss, epoch):
            return TrainResult(last_good, curve, time.perf_counter() - started, diverged_at=epoch)
        last_good = snapshot()
    return TrainResult(last_good, curve, time.perf_counter() - started)


def encoder_state_from(config: ModelConfig, enc_field: EnfParams, positions: Array) -> EncoderState:
    return EncoderState(params=enc_field, positions=positions,
                        inner_steps=config.inner_steps, inner_lr=config.inner_lr)


def train_decoder(
    train_samples: Sequence[FieldSample],
    encoder_ckpt: Checkpoint,
    train_config: TrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train the output decoder against the frozen encoder.

    Latents are re-fitted from scratch on each epoch's point subset.  With
    ``cache_latents`` they are fitted once per sample on the full point set
    and reused, trading fidelity to the paper's procedure for speed.
    """
    from .checkpoint import model_from_checkpoint

    if not train_samples:
        raise ConfigError("empty training split")
    started = time.perf_counter()
    loaded = model_from_checkpoint(encoder_ckpt)
    config, stats, encoder = loaded.config, loaded.stats, loaded.encoder
    normalized = [normalize(s, stats) for s in train_samples]

    rng = np.random.default_rng(np.random.SeedSequence((train_config.seed, 10)))
    decoder = make_decoder_params(config, rng)
    weights = {k: v.copy() for k, v in decoder.weights().items()}
    optimizer = make_optimizer(train_config.optimizer, weights, train_config.lr)

    enc_weights = encoder.params.weights()
    cached_feats: list[Array] | None = None
    if train_config.cache_latents:
        cached_feats = []
        for sample in normalized:
            encoded, dist2 = pair_features(sample.coords, encoder.positions, encoder.params.fourier)
            feats, _ = inner_loop_t(
                encoded, dist2, sample.a, enc_weights,
                n_latents=config.n_latents, latent_dim=config.latent_dim,
                heads=config.heads, sigma=config.sigma,
                steps=encoder.inner_steps, lr=encoder.inner_lr, second_order=False)
            cached_feats.append(feats.data)

    def snapshot() -> Checkpoint:
        return build_checkpoint(
            config, stats, encoder.positions, encoder.params,
            decoder_params=decoder.with_weights(weights),
            extra_metadata={"train.seed": str(train_config.seed)})

    curve: list[float] = []
    last_good = snapshot()
    for epoch in range(train_config.epochs):
        ds_rng = _epoch_rng(train_config.seed, epoch, 11)
        order = _epoch_rng(train_config.seed, epoch, 12).permutation(len(normalized))
        epoch_losses: list[float] = []
        try:
            for start in range(0, len(order), train_config.batch_size):
                batch = order[start:start + train_config.batch_size]
                leaves = {k: Tensor(v) for k, v in weights.items()}
                grads = {k: np.zeros_like(v) for k, v in weights.items()}
                for index in batch:
                    sample = downsample(normalized[index], train_config.downsample, ds_rng)
                    if cached_feats is None:
                        encoded, dist2 = pair_features(sample.coords, encoder.positions,
                                                       encoder.params.fourier)
                        feats, _ = inner_loop_t(
                            encoded, dist2, sample.a, enc_weights,
                            n_latents=config.n_latents, latent_dim=config.latent_dim,
                            heads=config.heads, sigma=config.sigma,
                            steps=encoder.inner_steps, lr=encoder.inner_lr, second_order=False)
                        feats = feats.data
                    else:
                        feats = cached_feats[index]
                    conditioned = np.concatenate(
                        [feats, np.tile(sample.mu, (config.n_latents, 1))], axis=1)
                    encoded, dist2 = pair_features(sample.coords, encoder.positions,
                                                   decoder.field.fourier)
                    pred = decode_t(encoded, dist2, Tensor(conditioned), leaves,
                                    n_blocks=config.attention_blocks,
                                    heads=config.heads, sigma=config.sigma)
                    loss = recon_loss_t(pred, sample.u)
                    epoch_losses.append(float(loss.data))
                    for key, g in zip(weights, ad.backward(loss, list(leaves.values()))):
                        grads[key] += g.data / len(batch)
                optimizer.step(grads)
        except NumericError:
            return TrainResult(last_good, curve, time.perf_counter() - started, diverged_at=epoch)
        epoch_loss = float(np.mean(epoch_losses))
        curve.append(epoch_loss)
        if progress:
            progress(epoch, epoch_loss)
        if not _check_epoch_loss(epoch_loss, epoch):
            return TrainResult(last_good, curve, time.perf_counter() - started, diverged_at=epoch)
        last_good = snapshot()
    return TrainResult(last_good, curve, time.perf_counter() - started)
