"""Request/response models shared by the HTTP service and the CLI.

The CLI builds these same models from flags and dispatches them to the same
handlers the service routes use, so both front ends stay in lockstep.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenFlowRequest(BaseModel):
    out_dir: str
    n_train: int = 64
    n_test: int = 16
    points: int = 2048
    surface_points: int = 128
    radius_range: tuple[float, float] = (0.2, 0.5)
    speed_range: tuple[float, float] = (0.5, 1.5)
    angle_range_deg: tuple[float, float] = (-10.0, 15.0)
    circulation_range: tuple[float, float] = (-2.0, 2.0)
    seed: int = 0


class GenMultibodyRequest(BaseModel):
    out_dir: str
    n_train: int = 160
    n_test: int = 40
    points: int = 1024
    surface_points: int = 96
    offset_range: tuple[float, float] = (0.65, 1.1)
    angle_range_deg: tuple[float, float] = (-40.0, 40.0)
    seed: int = 0


class GenDatasetResponse(BaseModel):
    manifest: str
    n_train: int
    n_test: int


class ModelSettings(BaseModel):
    """Architecture knobs exposed to clients; mirrors ModelConfig."""

    latent_dim: int = 8
    n_latents: int = 9
    d_k: int = 32
    d_v: int = 96
    d_gamma: int = 96
    heads: int = 2
    sigma: float = 0.1
    rff_sigma_encoder: float = 1.0
    rff_sigma_decoder: float = 2.0
    attention_blocks: int = 2
    inner_steps: int = 3
    inner_lr: float = 1.0
    latent_bbox: tuple[float, float, float, float] = (-0.6, 0.6, -0.6, 0.6)  # x0 x1 y0 y1


class TrainSettings(BaseModel):
    epochs: int
    lr: float = 1e-3
    batch_size: int = 8
    downsample: int = 384
    seed: int = 0
    mode: Literal["second-order", "first-order"] = "second-order"
    optimizer: Literal["adam", "sgd"] = "adam"
    cache_latents: bool = False


class TrainEncoderRequest(BaseModel):
    data_dir: str
    out_checkpoint: str
    model: ModelSettings = Field(default_factory=ModelSettings)
    train: TrainSettings = Field(default_factory=lambda: TrainSettings(epochs=200))


class TrainDecoderRequest(BaseModel):
    data_dir: str
    encoder_checkpoint: str
    out_checkpoint: str
    train: TrainSettings = Field(default_factory=lambda: TrainSettings(epochs=400))


class TrainResponse(BaseModel):
    checkpoint: str
    epochs_run: int
    initial_loss: float
    final_loss: float
    seconds: float
    diverged_at: Optional[int] = None


class EncodeRequest(BaseModel):
    checkpoint: str
    sample: str


class EncodeResponse(BaseModel):
    positions: list[list[float]]
    features: list[list[float]]
    trace: list[float]


class InferRequest(BaseModel):
    checkpoint: str
    sample: str
    points: Optional[str] = None   # optional sample file supplying query coords
    out: Optional[str] = None      # write predictions as an .enfd file


class InferResponse(BaseModel):
    n_points: int
    seconds: float
    out: Optional[str] = None
    mean_abs: float


class EvalRequest(BaseModel):
    checkpoint: str
    data_dir: str
    split: Literal["test", "train"] = "test"
    threads: int = 1
    results_dir: Optional[str] = None
    plots: bool = False


class EvalResponse(BaseModel):
    volume_mse: float
    surface_mse: float
    lift_mse: float
    lift_mse_normalized: float
    spearman_lift: float
    seconds_per_sample: float


class SweepRequest(BaseModel):
    checkpoint: str
    data_dir: str
    resolutions: list[int] = [512, 1024, 2048, 4096]
    seed: int = 0
    results_dir: Optional[str] = None


class SweepRowModel(BaseModel):
    resolution: int
    volume_mse: float
    surface_mse: float
    seconds_per_sample: float


class SweepResponse(BaseModel):
    rows: list[SweepRowModel]


class AblateRequest(BaseModel):
    data_dir: str
    layouts: list[tuple[int, int]] = [(4, 16), (9, 8), (16, 4)]
    model: ModelSettings = Field(default_factory=ModelSettings)
    encoder_train: TrainSettings = Field(default_factory=lambda: TrainSettings(epochs=120, mode="first-order"))
    decoder_train: TrainSettings = Field(default_factory=lambda: TrainSettings(epochs=200, cache_latents=True))
    results_dir: Optional[str] = None


class AblateRowModel(BaseModel):
    n_latents: int
    latent_dim: int
    sdf_mse: float
    output_mse: float


class AblateResponse(BaseModel):
    rows: list[AblateRowModel]


class CompareEncodingsRequest(BaseModel):
    data_dir: str
    model: ModelSettings = Field(default_factory=ModelSettings)
    train: TrainSettings = Field(default_factory=lambda: TrainSettings(epochs=150, mode="first-order"))
    results_dir: Optional[str] = None


class CompareEncodingsResponse(BaseModel):
    local_mse: float
    global_mse: float
    ratio: float


class CheckGradRequest(BaseModel):
    tiny: bool = True
    tolerance: float = 1e-4
    inner_tolerance: float = 1e-3
    seed: int = 0


class CheckGradResponse(BaseModel):
    passed: bool
    max_rel_err: float
    suites: dict[str, float]


class ExportLatentsRequest(BaseModel):
    checkpoint: str
    data_dir: str
    out_dir: str
    split: Literal["test", "train"] = "test"


class ExportLatentsResponse(BaseModel):
    n_samples: int
    f32_file: str
    table_file: str


class HealthResponse(BaseModel):
    status: str
    version: str
