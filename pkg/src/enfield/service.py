"""FastAPI service wrapping the pipeline, and the handlers behind it.

Every operation is a plain function from a request model to a response model;
the HTTP routes and the CLI both call these handlers, so running a command
locally and POSTing it to a server are the same computation.  Domain errors
propagate as package exceptions; the HTTP layer translates them to status
codes (400 usage, 422 data, 500 numeric).
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__, schemas
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import (
    FieldSample,
    FlowDatasetConfig,
    MultibodyDatasetConfig,
    gen_flow_dataset,
    gen_multibody_dataset,
    load_split,
    read_sample,
    write_sample,
)
from .decoder import condition_latents
from .encoder import encode
from .errors import ConfigError, DataError, EnfieldError, NumericError, ShapeError
from .evaluate import (
    ablate_capacity,
    compare_local_global,
    discretization_sweep,
    evaluate_model,
    predict_sample,
    render_prediction_grid,
    save_heatmap,
    write_table,
)
from .model import ModelConfig
from .training import TrainConfig, denormalize, normalize, train_decoder, train_encoder


def model_config_from_settings(s: schemas.ModelSettings, mu_dim: int, n_a: int = 1, n_u: int = 1) -> ModelConfig:
    x0, x1, y0, y1 = s.latent_bbox
    return ModelConfig(
        n_a=n_a, n_u=n_u, latent_dim=s.latent_dim, mu_dim=mu_dim,
        n_latents=s.n_latents, d_k=s.d_k, d_v=s.d_v, d_gamma=s.d_gamma,
        heads=s.heads, sigma=s.sigma,
        rff_sigma_encoder=s.rff_sigma_encoder, rff_sigma_decoder=s.rff_sigma_decoder,
        attention_blocks=s.attention_blocks,
        inner_steps=s.inner_steps, inner_lr=s.inner_lr,
        latent_bbox=((x0, x1), (y0, y1)),
    )


def train_config_from_settings(s: schemas.TrainSettings) -> TrainConfig:
    return TrainConfig(
        epochs=s.epochs, lr=s.lr, batch_size=s.batch_size, downsample=s.downsample,
        seed=s.seed, mode=s.mode, optimizer=s.optimizer, cache_latents=s.cache_latents,
    )


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def handle_gen_flow(req: schemas.GenFlowRequest) -> schemas.GenDatasetResponse:
    config = FlowDatasetConfig(
        n_train=req.n_train, n_test=req.n_test, points=req.points,
        surface_points=req.surface_points, radius_range=req.radius_range,
        speed_range=req.speed_range, angle_range_deg=req.angle_range_deg,
        circulation_range=req.circulation_range, seed=req.seed,
    )
    train, test = gen_flow_dataset(req.out_dir, config)
    return schemas.GenDatasetResponse(
        manifest=str(Path(req.out_dir) / "manifest.txt"), n_train=len(train), n_test=len(test))


def handle_gen_multibody(req: schemas.GenMultibodyRequest) -> schemas.GenDatasetResponse:
    config = MultibodyDatasetConfig(
        n_train=req.n_train, n_test=req.n_test, points=req.points,
        surface_points=req.surface_points, offset_range=req.offset_range,
        angle_range_deg=req.angle_range_deg, seed=req.seed,
    )
    train, test = gen_multibody_dataset(req.out_dir, config)
    return schemas.GenDatasetResponse(
        manifest=str(Path(req.out_dir) / "manifest.txt"), n_train=len(train), n_test=len(test))


def handle_train_encoder(req: schemas.TrainEncoderRequest) -> schemas.TrainResponse:
    train_samples, _ = load_split(req.data_dir)
    mu_dim = train_samples[0].mu.shape[0]
    config = model_config_from_settings(req.model, mu_dim, n_a=train_samples[0].a.shape[1],
                                        n_u=train_samples[0].u.shape[1])
    result = train_encoder(train_samples, config, train_config_from_settings(req.train))
    save_checkpoint(req.out_checkpoint, result.checkpoint)
    return schemas.TrainResponse(
        checkpoint=str(req.out_checkpoint), epochs_run=len(result.loss_curve),
        initial_loss=result.loss_curve[0], final_loss=result.loss_curve[-1],
        seconds=result.seconds, diverged_at=result.diverged_at)


def handle_train_decoder(req: schemas.TrainDecoderRequest) -> schemas.TrainResponse:
    train_samples, _ = load_split(req.data_dir)
    encoder_ckpt = load_checkpoint(req.encoder_checkpoint)
    result = train_decoder(train_samples, encoder_ckpt, train_config_from_settings(req.train))
    save_checkpoint(req.out_checkpoint, result.checkpoint)
    return schemas.TrainResponse(
        checkpoint=str(req.out_checkpoint), epochs_run=len(result.loss_curve),
        initial_loss=result.loss_curve[0], final_loss=result.loss_curve[-1],
        seconds=result.seconds, diverged_at=result.diverged_at)


def handle_encode(req: schemas.EncodeRequest) -> schemas.EncodeResponse:
    model = model_from_checkpoint(load_checkpoint(req.checkpoint))
    sample = read_sample(req.sample)
    if sample.d != model.config.d or sample.a.shape[1] != model.config.n_a:
        raise ShapeError(
            f"sample dims (d={sample.d}, n_a={sample.a.shape[1]}) do not match "
            f"model (d={model.config.d}, n_a={model.config.n_a})")
    norm = normalize(sample, model.stats)
    cloud, trace = encode(norm, model.encoder)
    return schemas.EncodeResponse(
        positions=cloud.positions.tolist(), features=cloud.features.tolist(),
        trace=list(trace.losses))


def handle_infer(req: schemas.InferRequest) -> schemas.InferResponse:
    model = model_from_checkpoint(load_checkpoint(req.checkpoint))
    sample = read_sample(req.sample)
    if sample.d != model.config.d or sample.a.shape[1] != model.config.n_a \
            or sample.mu.shape[0] != model.config.mu_dim:
        raise ShapeError(
            f"sample dims (d={sample.d}, n_a={sample.a.shape[1]}, l_mu={sample.mu.shape[0]}) "
            f"do not match model (d={model.config.d}, n_a={model.config.n_a}, "
            f"l_mu={model.config.mu_dim})")
    queries = None
    target = sample
    if req.points is not None:
        target = read_sample(req.points)
        if target.d != model.config.d:
            raise ShapeError(f"query points have d={target.d}, model expects {model.config.d}")
        queries = target.coords
    started = time.perf_counter()
    pred_norm = predict_sample(model, sample, queries=queries)
    seconds = time.perf_counter() - started
    pred = denormalize(pred_norm, model.stats)
    out_path = None
    if req.out is not None:
        out = FieldSample(coords=target.coords, a=target.a, u=pred, mu=sample.mu, mask=target.mask)
        write_sample(req.out, out.quantized())
        out_path = str(req.out)
    return schemas.InferResponse(
        n_points=pred.shape[0], seconds=seconds, out=out_path,
        mean_abs=float(np.mean(np.abs(pred))))


def _pick_split(data_dir: str, split: str) -> list[FieldSample]:
    train, test = load_split(data_dir)
    samples = train if split == "train" else test
    if not samples:
        raise DataError(f"dataset {data_dir} has no {split} samples")
    return samples


def handle_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    model = model_from_checkpoint(load_checkpoint(req.checkpoint))
    samples = _pick_split(req.data_dir, req.split)
    report = evaluate_model(model, samples, threads=req.threads)
    if req.results_dir:
        write_table(["metric", "value"], report.rows(), Path(req.results_dir) / "metrics.tsv")
        write_table(["sample", "lift_true", "lift_pred"],
                    [(i, t, p) for i, (t, p) in enumerate(zip(report.lift_true, report.lift_pred))],
                    Path(req.results_dir) / "lift.tsv")
        if req.plots:
            pred, truth, error = render_prediction_grid(model, samples[0])
            lo = float(np.nanmin(truth))
            hi = float(np.nanmax(truth))
            save_heatmap(Path(req.results_dir) / "field_pred.ppm", pred, lo, hi)
            save_heatmap(Path(req.results_dir) / "field_true.ppm", truth, lo, hi)
            save_heatmap(Path(req.results_dir) / "field_error.ppm", error)
    return schemas.EvalResponse(
        volume_mse=report.volume_mse, surface_mse=report.surface_mse,
        lift_mse=report.lift_mse, lift_mse_normalized=report.lift_mse_normalized,
        spearman_lift=report.spearman_lift, seconds_per_sample=report.seconds_per_sample)


def handle_sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
    model = model_from_checkpoint(load_checkpoint(req.checkpoint))
    samples = _pick_split(req.data_dir, "test")
    rows = discretization_sweep(model, samples, req.resolutions, seed=req.seed)
    response = schemas.SweepResponse(rows=[
        schemas.SweepRowModel(resolution=r.resolution, volume_mse=r.volume_mse,
                              surface_mse=r.surface_mse, seconds_per_sample=r.seconds_per_sample)
        for r in rows
    ])
    if req.results_dir:
        write_table(["resolution", "volume_mse", "surface_mse", "seconds_per_sample"],
                    [(r.resolution, r.volume_mse, r.surface_mse, r.seconds_per_sample) for r in rows],
                    Path(req.results_dir) / "resolution_sweep.tsv")
    return response


def handle_ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
    train_samples, test_samples = load_split(req.data_dir)
    mu_dim = train_samples[0].mu.shape[0]
    base = model_config_from_settings(req.model, mu_dim)
    rows = ablate_capacity(
        train_samples, test_samples, base,
        train_config_from_settings(req.encoder_train),
        train_config_from_settings(req.decoder_train),
        layouts=[tuple(layout) for layout in req.layouts],
    )
    response = schemas.AblateResponse(rows=[
        schemas.AblateRowModel(n_latents=r.n_latents, latent_dim=r.latent_dim,
                               sdf_mse=r.sdf_mse, output_mse=r.output_mse)
        for r in rows
    ])
    if req.results_dir:
        write_table(["n_latents", "latent_dim", "sdf_mse", "output_mse"],
                    [(r.n_latents, r.latent_dim, r.sdf_mse, r.output_mse) for r in rows],
                    Path(req.results_dir) / "capacity_ablation.tsv")
    return response


def handle_compare_encodings(req: schemas.CompareEncodingsRequest) -> schemas.CompareEncodingsResponse:
    train_samples, test_samples = load_split(req.data_dir)
    base = model_config_from_settings(req.model, mu_dim=0)
    comparison = compare_local_global(
        train_samples, test_samples, base, train_config_from_settings(req.train))
    if req.results_dir:
        write_table(["encoding", "test_sdf_mse"],
                    [("local_4x8", comparison.local_mse), ("global_1x32", comparison.global_mse),
                     ("ratio", comparison.ratio)],
                    Path(req.results_dir) / "encoding_comparison.tsv")
    return schemas.CompareEncodingsResponse(
        local_mse=comparison.local_mse, global_mse=comparison.global_mse, ratio=comparison.ratio)


def handle_check_grad(req: schemas.CheckGradRequest) -> schemas.CheckGradResponse:
    from .gradcheck import run_gradient_suites

    suites = run_gradient_suites(tolerance=req.tolerance, inner_tolerance=req.inner_tolerance,
                                 seed=req.seed)
    worst = max(suites.values())
    passed = all(
        err <= (req.inner_tolerance if name.startswith("inner") else req.tolerance)
        for name, err in suites.items()
    )
    return schemas.CheckGradResponse(passed=passed, max_rel_err=worst, suites=suites)


def handle_export_latents(req: schemas.ExportLatentsRequest) -> schemas.ExportLatentsResponse:
    model = model_from_checkpoint(load_checkpoint(req.checkpoint))
    samples = _pick_split(req.data_dir, req.split)
    out_dir = Path(req.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features = []
    rows = []
    for i, sample in enumerate(samples):
        norm = normalize(sample, model.stats)
        cloud, _ = encode(norm, model.encoder)
        features.append(cloud.features.astype(np.float32))
        for j in range(cloud.n_latents):
            rows.append((i, j, *cloud.positions[j], *cloud.features[j]))
    blob = np.stack(features)  # (samples, N_lat, l_d)
    f32_file = out_dir / "latents.f32"
    blob.astype("<f4").tofile(f32_file)
    d = model.config.d
    header = ["sample", "anchor"] + [f"p{k}" for k in range(d)] \
        + [f"c{k}" for k in range(model.config.latent_dim)]
    table_file = out_dir / "latents.tsv"
    write_table(header, rows, table_file)
    return schemas.ExportLatentsResponse(
        n_samples=len(samples), f32_file=str(f32_file), table_file=str(table_file))


# ---------------------------------------------------------------------------
# FastAPI application
# ---------------------------------------------------------------------------

def create_app() -> FastAPI:
    app = FastAPI(title="enfield", version=__version__)

    @app.exception_handler(EnfieldError)
    async def _domain_error(request: Request, exc: EnfieldError):
        if isinstance(exc, (NumericError,)):
            status = 500
        elif isinstance(exc, (ConfigError,)):
            status = 400
        else:  # data, shape, geometry, quadrature
            status = 422
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/datasets/flow", response_model=schemas.GenDatasetResponse)
    def gen_flow(req: schemas.GenFlowRequest) -> schemas.GenDatasetResponse:
        return handle_gen_flow(req)

    @app.post("/datasets/multibody", response_model=schemas.GenDatasetResponse)
    def gen_multibody(req: schemas.GenMultibodyRequest) -> schemas.GenDatasetResponse:
        return handle_gen_multibody(req)

    @app.post("/train/encoder", response_model=schemas.TrainResponse)
    def train_enc(req: schemas.TrainEncoderRequest) -> schemas.TrainResponse:
        return handle_train_encoder(req)

    @app.post("/train/decoder", response_model=schemas.TrainResponse)
    def train_dec(req: schemas.TrainDecoderRequest) -> schemas.TrainResponse:
        return handle_train_decoder(req)

    @app.post("/encode", response_model=schemas.EncodeResponse)
    def encode_route(req: schemas.EncodeRequest) -> schemas.EncodeResponse:
        return handle_encode(req)

    @app.post("/infer", response_model=schemas.InferResponse)
    def infer_route(req: schemas.InferRequest) -> schemas.InferResponse:
        return handle_infer(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_route(req: schemas.EvalRequest) -> schemas.EvalResponse:
        return handle_eval(req)

    @app.post("/experiments/resolution-sweep", response_model=schemas.SweepResponse)
    def sweep_route(req: schemas.SweepRequest) -> schemas.SweepResponse:
        return handle_sweep(req)

    @app.post("/experiments/capacity-ablation", response_model=schemas.AblateResponse)
    def ablate_route(req: schemas.AblateRequest) -> schemas.AblateResponse:
        return handle_ablate(req)

    @app.post("/experiments/encoding-comparison", response_model=schemas.CompareEncodingsResponse)
    def compare_route(req: schemas.CompareEncodingsRequest) -> schemas.CompareEncodingsResponse:
        return handle_compare_encodings(req)

    @app.post("/check/gradients", response_model=schemas.CheckGradResponse)
    def check_grad_route(req: schemas.CheckGradRequest) -> schemas.CheckGradResponse:
        return handle_check_grad(req)

    @app.post("/latents/export", response_model=schemas.ExportLatentsResponse)
    def export_latents_route(req: schemas.ExportLatentsRequest) -> schemas.ExportLatentsResponse:
        return handle_export_latents(req)

    return app


app = create_app()
