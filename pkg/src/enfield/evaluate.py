"""Metrics and experiment drivers.

Field errors are reported on the standardised scale (predictions and targets
both normalised); lift coefficients are integrated from surface pressure in
physical units, with the closed-form circulation lift as a cross-check.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import Checkpoint, LoadedModel, model_from_checkpoint
from .data import (
    FieldSample,
    FlowDatasetConfig,
    MultibodyDatasetConfig,
    flow_sample,
    reconstruct_flow_case,
)
from .decoder import condition_latents, decode
from .encoder import encode
from .errors import ConfigError, DataError, QuadratureError
from .model import ModelConfig
from .physics import FlowCase
from .training import (
    NormStats,
    TrainConfig,
    denormalize,
    loss_recon,
    normalize,
    train_decoder,
    train_encoder,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# Elementary metrics
# ---------------------------------------------------------------------------

def mse_split(pred: Array, sample: FieldSample) -> tuple[float, float]:
    """(volume MSE, surface MSE) of a normalised prediction against the
    sample's (normalised) output field, split by the surface mask."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != sample.u.shape:
        raise DataError(f"prediction {pred.shape} does not match field {sample.u.shape}")
    if not np.any(sample.mask):
        raise DataError("surface MSE undefined: sample has no surface points")
    err = (pred - sample.u) ** 2
    volume = float(err[~sample.mask].mean()) if np.any(~sample.mask) else 0.0
    surface = float(err[sample.mask].mean())
    return volume, surface


def _average_ranks(values: Array) -> Array:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ConfigError(f"spearman needs two equal-length vectors of >= 2 values, got {xs.shape}, {ys.shape}")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise DataError("spearman undefined for a constant vector")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))


def lift_coefficient(surface_xy: Array, cp: Array, case: FlowCase) -> float:
    """Lift from surface pressure by trapezoidal integration around the body.

    Points must lie on the body in angular order with uniform spacing.  The
    pressure force is projected on the axis 90 degrees clockwise from the
    freestream and normalised by the diameter, so the analytic value for a
    circle is circulation / (speed * radius).
    """
    surface_xy = np.asarray(surface_xy, dtype=np.float64)
    cp = np.asarray(cp, dtype=np.float64).reshape(-1)
    if surface_xy.ndim != 2 or surface_xy.shape[0] != cp.shape[0]:
        raise QuadratureError(f"surface points {surface_xy.shape} vs cp {cp.shape}")
    n = surface_xy.shape[0]
    if n < 8:
        raise QuadratureError(f"need at least 8 surface points for the quadrature, got {n}")
    body = case.body
    rel = surface_xy - np.asarray(body.center)
    theta = np.unwrap(np.arctan2(rel[:, 1], rel[:, 0]))
    spacing = np.diff(theta)
    if not np.allclose(spacing, spacing[0], rtol=1e-3, atol=1e-6):
        raise QuadratureError("surface points must be in angular order with uniform spacing")
    normals = rel / np.linalg.norm(rel, axis=1, keepdims=True)

    # Close the loop and integrate -Cp n ds with the trapezoidal rule.
    theta_closed = np.append(theta, theta[0] + np.sign(spacing[0]) * 2 * np.pi)
    integrand = -cp[:, None] * normals * body.radius
    integrand_closed = np.vstack([integrand, integrand[:1]])
    force = np.stack([
        np.trapezoid(integrand_closed[:, 0], theta_closed),
        np.trapezoid(integrand_closed[:, 1], theta_closed),
    ])
    if spacing[0] < 0:  # clockwise ordering traverses the contour backwards
        force = -force
    lift_axis = np.array([np.sin(case.angle), -np.cos(case.angle)])
    return float(force @ lift_axis / (2 * body.radius))


def lift_truth(case: FlowCase, n_points: int = 256) -> tuple[float, float]:
    """Analytic lift two ways: closed form and quadrature of the exact Cp.

    Disagreement beyond 1% means the surface mesh or the quadrature is broken.
    """
    from .physics import potential_flow, surface_points

    pts = surface_points(case.body, n_points)
    _, cp = potential_flow(case, pts)
    quad = lift_coefficient(pts, cp, case)
    exact = case.lift_coefficient_exact()
    if abs(quad - exact) > 0.01 * max(abs(exact), 1.0):
        raise QuadratureError(
            f"lift cross-check failed: quadrature {quad:.6f} vs closed form {exact:.6f}")
    return exact, quad


# ---------------------------------------------------------------------------
# Whole-model evaluation
# ---------------------------------------------------------------------------

@dataclass
class SampleEval:
    volume_mse: float
    surface_mse: float
    lift_true: float
    lift_pred: float
    lift_true_norm: float
    lift_pred_norm: float
    seconds: float


@dataclass
class MetricReport:
    volume_mse: float
    surface_mse: float
    lift_mse: float
    lift_mse_normalized: float
    spearman_lift: float
    seconds_per_sample: float
    lift_true: list[float] = dataclass_field(default_factory=list)
    lift_pred: list[float] = dataclass_field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("volume_mse", f"{self.volume_mse:.6e}"),
            ("surface_mse", f"{self.surface_mse:.6e}"),
            ("lift_mse", f"{self.lift_mse:.6e}"),
            ("lift_mse_normalized", f"{self.lift_mse_normalized:.6e}"),
            ("spearman_lift", f"{self.spearman_lift:.6f}"),
            ("seconds_per_sample", f"{self.seconds_per_sample:.4f}"),
        ]


def predict_sample(model: LoadedModel, sample: FieldSample, queries: Array | None = None) -> Array:
    """Normalised prediction of the output field at the sample's points
    (or at explicit query coordinates in physical units)."""
    if model.decoder is None:
        raise ConfigError("checkpoint has no decoder; train one or use encode")
    stats: NormStats = model.stats
    norm = normalize(sample, stats)
    z, _ = encode(norm, model.encoder)
    conditioned = condition_latents(z, norm.mu)
    if queries is None:
        coords = norm.coords
    else:
        from .training import normalize_coords

        coords = normalize_coords(np.asarray(queries, dtype=np.float64), stats)
    return decode(conditioned, coords, model.decoder)


def _eval_one(model: LoadedModel, sample: FieldSample) -> SampleEval:
    stats: NormStats = model.stats
    started = time.perf_counter()
    pred_norm = predict_sample(model, sample)
    seconds = time.perf_counter() - started
    norm = normalize(sample, stats)
    volume, surface = mse_split(pred_norm, norm)
    case = reconstruct_flow_case(sample)
    surf = sample.mask
    pred_phys = denormalize(pred_norm, stats)
    lift_pred = lift_coefficient(sample.coords[surf], pred_phys[surf, 0], case)
    lift_true = lift_coefficient(sample.coords[surf], sample.u[surf, 0], case)
    lift_pred_n = lift_coefficient(sample.coords[surf], pred_norm[surf, 0], case)
    lift_true_n = lift_coefficient(sample.coords[surf], norm.u[surf, 0], case)
    return SampleEval(volume, surface, lift_true, lift_pred, lift_true_n, lift_pred_n, seconds)


def evaluate_model(model: LoadedModel, samples: Sequence[FieldSample], threads: int = 1) -> MetricReport:
    """Volume/surface MSE, lift errors and rank correlation over a test split."""
    if not samples:
        raise ConfigError("no samples to evaluate")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            evals = list(pool.map(lambda s: _eval_one(model, s), samples))
    else:
        evals = [_eval_one(model, s) for s in samples]
    lift_true = [e.lift_true for e in evals]
    lift_pred = [e.lift_pred for e in evals]
    return MetricReport(
        volume_mse=float(np.mean([e.volume_mse for e in evals])),
        surface_mse=float(np.mean([e.surface_mse for e in evals])),
        lift_mse=float(np.mean((np.array(lift_pred) - np.array(lift_true)) ** 2)),
        lift_mse_normalized=float(np.mean(
            (np.array([e.lift_pred_norm for e in evals])
             - np.array([e.lift_true_norm for e in evals])) ** 2)),
        spearman_lift=spearman(lift_true, lift_pred) if len(evals) >= 2 else 1.0,
        seconds_per_sample=float(np.median([e.seconds for e in evals])),
        lift_true=lift_true,
        lift_pred=lift_pred,
    )


def encoder_recon_mse(model: LoadedModel, samples: Sequence[FieldSample]) -> float:
    """Test-set input reconstruction error of the encoder (raw input units)."""
    from .field import enf_forward

    total = 0.0
    for sample in samples:
        norm = normalize(sample, model.stats)
        z, _ = encode(norm, model.encoder)
        pred = enf_forward(z, norm.coords, model.encoder.params)
        total += loss_recon(pred, norm.a) / norm.a.shape[1]
    return total / len(samples)


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    resolution: int
    volume_mse: float
    surface_mse: float
    seconds_per_sample: float


def discretization_sweep(
    model: LoadedModel,
    test_samples: Sequence[FieldSample],
    resolutions: Sequence[int],
    seed: int = 0,
    surface_fraction: float = 1 / 16,
) -> list[SweepRow]:
    """Re-mesh each test case at several resolutions and evaluate one forward
    pass per sample at each; accuracy should barely move."""
    cases = [reconstruct_flow_case(s) for s in test_samples]
    rows: list[SweepRow] = []
    for resolution in resolutions:
        n_surface = max(8, int(resolution * surface_fraction))
        remeshed = []
        for i, case in enumerate(cases):
            rng = np.random.default_rng(np.random.SeedSequence((seed, resolution, i)))
            remeshed.append(flow_sample(case, resolution, n_surface, rng))
        report = evaluate_model(model, remeshed)
        rows.append(SweepRow(resolution, report.volume_mse, report.surface_mse,
                             report.seconds_per_sample))
    return rows


@dataclass
class AblationRow:
    n_latents: int
    latent_dim: int
    sdf_mse: float
    output_mse: float


def ablate_capacity(
    train_samples: Sequence[FieldSample],
    test_samples: Sequence[FieldSample],
    base_config: ModelConfig,
    encoder_config: TrainConfig,
    decoder_config: TrainConfig,
    layouts: Sequence[tuple[int, int]] = ((4, 16), (9, 8), (16, 4)),
) -> list[AblationRow]:
    """Train one model per latent layout under identical seeds and budgets."""
    rows: list[AblationRow] = []
    for n_latents, latent_dim in layouts:
        config = base_config.replace(n_latents=n_latents, latent_dim=latent_dim)
        enc = train_encoder(train_samples, config, encoder_config)
        dec = train_decoder(train_samples, enc.checkpoint, decoder_config)
        model = model_from_checkpoint(dec.checkpoint)
        sdf_mse = encoder_recon_mse(model, test_samples)
        report = evaluate_model(model, test_samples)
        rows.append(AblationRow(n_latents, latent_dim, sdf_mse, report.volume_mse))
    return rows


@dataclass
class EncodingComparison:
    local_mse: float
    global_mse: float

    @property
    def ratio(self) -> float:
        return self.global_mse / self.local_mse


def compare_local_global(
    train_samples: Sequence[FieldSample],
    test_samples: Sequence[FieldSample],
    base_config: ModelConfig,
    train_config: TrainConfig,
) -> EncodingComparison:
    """Anchored local latents (4 x 8, windowed) against one global latent
    (1 x 32, no distance penalty) at equal capacity and budget."""
    local_cfg = base_config.replace(n_latents=4, latent_dim=8, mu_dim=0)
    global_cfg = base_config.replace(n_latents=1, latent_dim=32, mu_dim=0, sigma=0.0)
    results = []
    for config in (local_cfg, global_cfg):
        enc = train_encoder(train_samples, config, train_config)
        model = model_from_checkpoint(enc.checkpoint)
        results.append(encoder_recon_mse(model, test_samples))
    return EncodingComparison(local_mse=results[0], global_mse=results[1])


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def write_table(header: Sequence[str], rows: Iterable[Sequence], path=None) -> str:
    """Tab-separated table; written to ``path`` when given, always returned."""
    lines = ["\t".join(str(h) for h in header)]
    for row in rows:
        lines.append("\t".join(str(c) for c in row))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def _diverging_colormap(t: Array) -> Array:
    """Blue-white-red map for t in [0, 1]; returns uint8 RGB."""
    t = np.clip(t, 0.0, 1.0)
    r = np.clip(2.0 * t, 0, 1)
    b = np.clip(2.0 * (1.0 - t), 0, 1)
    g = np.minimum(r, b)
    return (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def save_heatmap(path, values: Array, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write a 2-D scalar field as a binary PPM image (NaN cells black)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"heatmap needs a 2-D array, got shape {values.shape}")
    finite = np.isfinite(values)
    lo = np.min(values[finite]) if vmin is None else vmin
    hi = np.max(values[finite]) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    rgb = _diverging_colormap((values - lo) / span)
    rgb[~finite] = 0
    h, w = values.shape
    with open(path, "wb") as handle:
        handle.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        handle.write(rgb[::-1].tobytes())  # flip so +y points up


def render_prediction_grid(model: LoadedModel, sample: FieldSample, resolution: int = 128):
    """Predicted / true / error fields on a regular grid (NaN inside the body)."""
    from .physics import potential_flow, sdf

    case = reconstruct_flow_case(sample)
    (x0, x1), (y0, y1) = case.geometry.domain
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    grid = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)
    outside = sdf(case.geometry, grid) > 0
    pred = np.full(len(grid), np.nan)
    truth = np.full(len(grid), np.nan)
    pred_norm = predict_sample(model, sample, queries=grid[outside])
    pred[outside] = denormalize(pred_norm, model.stats)[:, 0]
    _, cp = potential_flow(case, grid[outside])
    truth[outside] = cp
    shape = (resolution, resolution)
    return pred.reshape(shape), truth.reshape(shape), (pred - truth).reshape(shape)
