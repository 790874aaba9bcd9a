"""Model configuration and parameter construction.

One :class:`ModelConfig` describes both fields (encoder and decoder share the
attention dimensions; each has its own Fourier matrix and frequency scale) and
the inner-loop settings used to fit latent features to a sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .field import EnfParams, make_enf_params

Array = np.ndarray

Bbox = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class ModelConfig:
    d: int = 2                  # spatial dimension
    n_a: int = 1                # input field channels
    n_u: int = 1                # output field channels
    latent_dim: int = 8         # feature length per anchor
    mu_dim: int = 3             # global parameter length
    n_latents: int = 9
    d_k: int = 32
    d_v: int = 64
    d_gamma: int = 64
    heads: int = 2
    sigma: float = 0.1          # Gaussian window; 0 disables locality
    rff_sigma_encoder: float = 1.0
    rff_sigma_decoder: float = 2.0
    attention_blocks: int = 2
    inner_steps: int = 3        # K
    inner_lr: float = 1.0       # alpha
    latent_bbox: Bbox = ((-1.0, 1.0), (-1.0, 1.0))

    def __post_init__(self):
        if self.d < 1 or self.n_a < 1 or self.n_u < 1 or self.latent_dim < 1:
            raise ConfigError("dimensions must be positive")
        if self.mu_dim < 0:
            raise ConfigError("mu_dim must be non-negative")
        if self.n_latents < 1:
            raise ConfigError("need at least one latent anchor")
        if self.d_gamma % 2:
            raise ConfigError(f"d_gamma must be even, got {self.d_gamma}")
        if self.heads < 1 or self.d_k % self.heads or self.d_v % self.heads:
            raise ConfigError("d_k and d_v must divide evenly into heads")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if self.inner_lr <= 0:
            raise ConfigError("inner_lr must be positive")
        if len(self.latent_bbox) != self.d:
            raise ConfigError(f"latent bbox has {len(self.latent_bbox)} axes, d={self.d}")
        for lo, hi in self.latent_bbox:
            if not lo < hi:
                raise ConfigError(f"degenerate bbox axis ({lo}, {hi})")

    @property
    def decoder_feat_dim(self) -> int:
        return self.latent_dim + self.mu_dim

    def replace(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)

    def to_metadata(self) -> dict[str, str]:
        flat = {
            "d": self.d, "n_a": self.n_a, "n_u": self.n_u,
            "latent_dim": self.latent_dim, "mu_dim": self.mu_dim,
            "n_latents": self.n_latents, "d_k": self.d_k, "d_v": self.d_v,
            "d_gamma": self.d_gamma, "heads": self.heads, "sigma": self.sigma,
            "rff_sigma_encoder": self.rff_sigma_encoder,
            "rff_sigma_decoder": self.rff_sigma_decoder,
            "attention_blocks": self.attention_blocks,
            "inner_steps": self.inner_steps, "inner_lr": self.inner_lr,
            "latent_bbox": ";".join(f"{lo!r},{hi!r}" for lo, hi in self.latent_bbox),
        }
        return {f"model.{k}": str(v) for k, v in flat.items()}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelConfig":
        def get(key: str) -> str:
            try:
                return meta[f"model.{key}"]
            except KeyError as exc:
                raise ConfigError(f"checkpoint metadata missing model.{key}") from exc

        bbox = tuple(
            (float(part.split(",")[0]), float(part.split(",")[1]))
            for part in get("latent_bbox").split(";")
        )
        return cls(
            d=int(get("d")), n_a=int(get("n_a")), n_u=int(get("n_u")),
            latent_dim=int(get("latent_dim")), mu_dim=int(get("mu_dim")),
            n_latents=int(get("n_latents")), d_k=int(get("d_k")), d_v=int(get("d_v")),
            d_gamma=int(get("d_gamma")), heads=int(get("heads")), sigma=float(get("sigma")),
            rff_sigma_encoder=float(get("rff_sigma_encoder")),
            rff_sigma_decoder=float(get("rff_sigma_decoder")),
            attention_blocks=int(get("attention_blocks")),
            inner_steps=int(get("inner_steps")), inner_lr=float(get("inner_lr")),
            latent_bbox=bbox,
        )


def build_encoder_field(config: ModelConfig, rng: np.random.Generator) -> EnfParams:
    """Encoder field: reconstructs the input channels from latent features."""
    return make_enf_params(
        rng,
        d=config.d,
        feat_dim=config.latent_dim,
        n_out=config.n_a,
        d_k=config.d_k,
        d_v=config.d_v,
        d_gamma=config.d_gamma,
        heads=config.heads,
        sigma=config.sigma,
        rff_sigma=config.rff_sigma_encoder,
    )


def build_decoder_field(config: ModelConfig, rng: np.random.Generator) -> EnfParams:
    """Decoder field: maps conditioned latent features to the output channels."""
    return make_enf_params(
        rng,
        d=config.d,
        feat_dim=config.decoder_feat_dim,
        n_out=config.n_u,
        d_k=config.d_k,
        d_v=config.d_v,
        d_gamma=config.d_gamma,
        heads=config.heads,
        sigma=config.sigma,
        rff_sigma=config.rff_sigma_decoder,
    )
