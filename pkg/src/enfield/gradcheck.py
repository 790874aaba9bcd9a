"""Finite-difference gradient suites over tiny model instances.

Three suites: the field weights under a mean-squared output loss, the decoder
weights (blocks + field) under the same, and the shared encoder weights
differentiated through a two-step inner loop (second-order path).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .decoder import decode_t, make_decoder_params
from .encoder import init_latent_positions, inner_loop_t
from .field import enf_forward_t, make_enf_params, pair_features, recon_loss_t
from .model import ModelConfig


def tiny_config(mu_dim: int = 2) -> ModelConfig:
    return ModelConfig(
        latent_dim=3, mu_dim=mu_dim, n_latents=2, d_k=4, d_v=6, d_gamma=8, heads=2,
        sigma=0.3, attention_blocks=2, inner_steps=2, inner_lr=0.5,
    )


def field_loss_suite(seed: int = 0) -> tuple:
    """(f, params): MSE of a tiny field against fixed targets, over its weights."""
    rng = np.random.default_rng(seed)
    config = tiny_config()
    field = make_enf_params(
        rng, d=2, feat_dim=config.latent_dim, n_out=2, d_k=config.d_k, d_v=config.d_v,
        d_gamma=config.d_gamma, heads=config.heads, sigma=config.sigma, rff_sigma=1.0)
    positions = init_latent_positions(config.latent_bbox, config.n_latents)
    feats = rng.standard_normal((config.n_latents, config.latent_dim))
    queries = rng.uniform(-1, 1, (5, 2))
    target = rng.standard_normal((5, 2))
    encoded, dist2 = pair_features(queries, positions, field.fourier)

    def f(p):
        pred = enf_forward_t(encoded, dist2, Tensor(feats), p,
                             heads=config.heads, sigma=config.sigma)
        return recon_loss_t(pred, target)

    return f, field.weights()


def decoder_loss_suite(seed: int = 0) -> tuple:
    """(f, params): MSE of a tiny block-stack + field over all decoder weights."""
    rng = np.random.default_rng(seed)
    config = tiny_config()
    decoder = make_decoder_params(config, rng)
    positions = init_latent_positions(config.latent_bbox, config.n_latents)
    feats = rng.standard_normal((config.n_latents, config.decoder_feat_dim))
    queries = rng.uniform(-1, 1, (5, 2))
    target = rng.standard_normal((5, 1))
    encoded, dist2 = pair_features(queries, positions, decoder.field.fourier)

    def f(p):
        pred = decode_t(encoded, dist2, Tensor(feats), p,
                        n_blocks=config.attention_blocks, heads=config.heads,
                        sigma=config.sigma)
        return recon_loss_t(pred, target)

    return f, decoder.weights()


def inner_loop_suite(seed: int = 0) -> tuple:
    """(f, params): encoder loss after a K=2 inner loop, over the shared weights.

    The inner gradient steps stay on the graph, so this exercises the
    second-order path.
    """
    rng = np.random.default_rng(seed)
    config = tiny_config()
    field = make_enf_params(
        rng, d=2, feat_dim=config.latent_dim, n_out=1, d_k=config.d_k, d_v=config.d_v,
        d_gamma=config.d_gamma, heads=config.heads, sigma=config.sigma, rff_sigma=1.0)
    positions = init_latent_positions(config.latent_bbox, config.n_latents)
    coords = rng.uniform(-1, 1, (10, 2))
    target = rng.standard_normal((10, 1))
    encoded, dist2 = pair_features(coords, positions, field.fourier)

    def f(p):
        _, losses = inner_loop_t(
            encoded, dist2, target, p,
            n_latents=config.n_latents, latent_dim=config.latent_dim,
            heads=config.heads, sigma=config.sigma,
            steps=config.inner_steps, lr=config.inner_lr, second_order=True)
        return losses[-1]

    return f, field.weights()


def run_gradient_suites(tolerance: float = 1e-4, inner_tolerance: float = 1e-3,
                        seed: int = 0) -> dict[str, float]:
    """Run all suites; returns max relative error per suite."""
    results: dict[str, float] = {}
    for name, builder, h, tol in (
        ("field", field_loss_suite, 1e-6, tolerance),
        ("decoder", decoder_loss_suite, 1e-6, tolerance),
        ("inner-loop", inner_loop_suite, 1e-5, inner_tolerance),
    ):
        f, params = builder(seed)
        report = finite_difference_check(f, params, h=h, tol=tol)
        results[name] = report.max_rel_err
    return results
