"""Command-line front end.

Each subcommand builds the same pydantic request the HTTP service accepts and
dispatches it: in-process by default, or to a running server via ``--server``.
Configuration files are flat ``key=value`` lines (``#`` comments) using the
same dotted keys as the request models (``model.latent_dim=8``); explicit
flags win over file values; unknown keys are rejected.

Exit codes: 0 success, 1 usage/configuration error, 2 data/geometry error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable

from pydantic import BaseModel, ValidationError

from . import __version__, schemas, service
from .errors import (
    CheckInvalidError,
    ConfigError,
    DataError,
    EnfieldError,
    GeometryError,
    NumericError,
    QuadratureError,
    ShapeError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise CliError(EXIT_USAGE, message)


def _exit_code_for(exc: EnfieldError) -> int:
    if isinstance(exc, (NumericError,)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ShapeError, GeometryError, QuadratureError)):
        return EXIT_DATA
    return EXIT_USAGE  # ConfigError, CheckInvalidError


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        parts = [p.strip() for p in text.split(",")]
        try:
            return [json.loads(p) for p in parts]
        except json.JSONDecodeError:
            return parts
    return text


def read_config_file(path: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    file_path = Path(path)
    if not file_path.exists():
        raise CliError(EXIT_USAGE, f"config file not found: {path}")
    for lineno, raw in enumerate(file_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(EXIT_USAGE, f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = _coerce(value.strip())
    return values


def _allowed_keys(model_cls: type[BaseModel], prefix: str = "") -> set[str]:
    keys: set[str] = set()
    for name, field_info in model_cls.model_fields.items():
        annotation = field_info.annotation
        nested = None
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            nested = annotation
        if nested is not None:
            keys |= _allowed_keys(nested, f"{prefix}{name}.")
        else:
            keys.add(f"{prefix}{name}")
    return keys


def _assign_dotted(target: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def build_request(model_cls: type[BaseModel], config_values: dict[str, Any],
                  flag_values: dict[str, Any]) -> BaseModel:
    """Merge config-file values and explicit flags into a request model."""
    allowed = _allowed_keys(model_cls)
    data: dict[str, Any] = {}
    for key, value in config_values.items():
        if key not in allowed:
            raise CliError(EXIT_USAGE, f"unknown configuration key {key!r} "
                                       f"(valid keys: {', '.join(sorted(allowed))})")
        _assign_dotted(data, key, value)
    for key, value in flag_values.items():
        if value is None:
            continue
        _assign_dotted(data, key, value)
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise CliError(EXIT_USAGE, f"invalid value for {where}: {first['msg']}") from exc


# ---------------------------------------------------------------------------
# Flag definitions per command
# ---------------------------------------------------------------------------

def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--latent-dim", dest="model.latent_dim", type=int)
    group.add_argument("--n-latents", dest="model.n_latents", type=int)
    group.add_argument("--d-k", dest="model.d_k", type=int)
    group.add_argument("--d-v", dest="model.d_v", type=int)
    group.add_argument("--d-gamma", dest="model.d_gamma", type=int)
    group.add_argument("--heads", dest="model.heads", type=int)
    group.add_argument("--sigma", dest="model.sigma", type=float)
    group.add_argument("--rff-sigma-encoder", dest="model.rff_sigma_encoder", type=float)
    group.add_argument("--rff-sigma-decoder", dest="model.rff_sigma_decoder", type=float)
    group.add_argument("--attention-blocks", dest="model.attention_blocks", type=int)
    group.add_argument("--inner-steps", dest="model.inner_steps", type=int)
    group.add_argument("--inner-lr", dest="model.inner_lr", type=float)
    group.add_argument("--latent-bbox", dest="model.latent_bbox", type=float, nargs=4,
                       metavar=("X0", "X1", "Y0", "Y1"))


def _add_train_flags(parser: argparse.ArgumentParser, prefix: str = "train") -> None:
    group = parser.add_argument_group(prefix)
    head = "" if prefix == "train" else prefix.replace("_train", "").replace("_", "-") + "-"

    def flag(name: str, **kwargs) -> None:
        group.add_argument(f"--{head}{name}", dest=f"{prefix}.{name.replace('-', '_')}", **kwargs)

    flag("epochs", type=int)
    flag("lr", type=float)
    flag("batch-size", type=int)
    flag("downsample", type=int)
    flag("seed", type=int)
    flag("mode", choices=["second-order", "first-order"])
    flag("optimizer", choices=["adam", "sgd"])
    flag("cache-latents", action="store_const", const=True)


def _print_model(response: BaseModel) -> None:
    for key, value in response.model_dump().items():
        if isinstance(value, list) and value and isinstance(value[0], dict):
            for row in value:
                print("\t".join(f"{k}={v}" for k, v in row.items()))
        else:
            print(f"{key}: {value}")


# ---------------------------------------------------------------------------
# Command registry
# ---------------------------------------------------------------------------

COMMANDS: dict[str, tuple[type[BaseModel], Callable, str]] = {
    "gen-flow": (schemas.GenFlowRequest, service.handle_gen_flow, "/datasets/flow"),
    "gen-multibody": (schemas.GenMultibodyRequest, service.handle_gen_multibody, "/datasets/multibody"),
    "train-encoder": (schemas.TrainEncoderRequest, service.handle_train_encoder, "/train/encoder"),
    "train-decoder": (schemas.TrainDecoderRequest, service.handle_train_decoder, "/train/decoder"),
    "encode": (schemas.EncodeRequest, service.handle_encode, "/encode"),
    "infer": (schemas.InferRequest, service.handle_infer, "/infer"),
    "eval": (schemas.EvalRequest, service.handle_eval, "/eval"),
    "sweep-res": (schemas.SweepRequest, service.handle_sweep, "/experiments/resolution-sweep"),
    "ablate-capacity": (schemas.AblateRequest, service.handle_ablate, "/experiments/capacity-ablation"),
    "compare-encodings": (schemas.CompareEncodingsRequest, service.handle_compare_encodings,
                          "/experiments/encoding-comparison"),
    "check-grad": (schemas.CheckGradRequest, service.handle_check_grad, "/check/gradients"),
    "export-latents": (schemas.ExportLatentsRequest, service.handle_export_latents, "/latents/export"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="enfield", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"enfield {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--server", help="dispatch to a running service at this base URL")

    p = sub.add_parser("gen-flow", help="generate the cylinder-flow dataset")
    common(p)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--points", dest="points", type=int)
    p.add_argument("--surface-points", dest="surface_points", type=int)
    p.add_argument("--seed", dest="seed", type=int)

    p = sub.add_parser("gen-multibody", help="generate the two-body SDF dataset")
    common(p)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--points", dest="points", type=int)
    p.add_argument("--surface-points", dest="surface_points", type=int)
    p.add_argument("--seed", dest="seed", type=int)

    p = sub.add_parser("train-encoder", help="meta-train the geometry encoder")
    common(p)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--out", dest="out_checkpoint", required=True)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("train-decoder", help="train the output decoder against a frozen encoder")
    common(p)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--encoder", dest="encoder_checkpoint", required=True)
    p.add_argument("--out", dest="out_checkpoint", required=True)
    _add_train_flags(p)

    p = sub.add_parser("encode", help="fit latents to one sample")
    common(p)
    p.add_argument("--ckpt", dest="checkpoint", required=True)
    p.add_argument("--sample", dest="sample", required=True)

    p = sub.add_parser("infer", help="predict the output field for one sample")
    common(p)
    p.add_argument("--ckpt", dest="checkpoint", required=True)
    p.add_argument("--sample", dest="sample", required=True)
    p.add_argument("--points", dest="points")
    p.add_argument("--out", dest="out")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--ckpt", dest="checkpoint", required=True)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--split", dest="split", choices=["test", "train"])
    p.add_argument("--threads", dest="threads", type=int)
    p.add_argument("--results", dest="results_dir")
    p.add_argument("--plots", dest="plots", action="store_const", const=True)

    p = sub.add_parser("sweep-res", help="discretization-invariance sweep")
    common(p)
    p.add_argument("--ckpt", dest="checkpoint", required=True)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--resolutions", dest="resolutions", type=int, nargs="+")
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--results", dest="results_dir")

    p = sub.add_parser("ablate-capacity", help="latent layout ablation at fixed capacity")
    common(p)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--results", dest="results_dir")
    _add_model_flags(p)
    _add_train_flags(p, "encoder_train")
    _add_train_flags(p, "decoder_train")

    p = sub.add_parser("compare-encodings", help="local anchored latents vs one global latent")
    common(p)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--results", dest="results_dir")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("check-grad", help="finite-difference gradient suites")
    common(p)
    p.add_argument("--tiny", action="store_const", const=True, dest="tiny")
    p.add_argument("--tolerance", dest="tolerance", type=float)
    p.add_argument("--inner-tolerance", dest="inner_tolerance", type=float)
    p.add_argument("--seed", dest="seed", type=int)

    p = sub.add_parser("export-latents", help="export fitted latents as raw f32 + TSV")
    common(p)
    p.add_argument("--ckpt", dest="checkpoint", required=True)
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--split", dest="split", choices=["test", "train"])

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _dispatch_remote(server: str, route: str, request: BaseModel) -> None:
    import httpx

    url = server.rstrip("/") + route
    response = httpx.post(url, json=request.model_dump(), timeout=None)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        code = {400: EXIT_USAGE, 422: EXIT_DATA}.get(response.status_code, EXIT_NUMERIC)
        raise CliError(code, f"server error ({response.status_code}): {detail}")
    print(json.dumps(response.json(), indent=2))


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    if args.command == "serve":
        import uvicorn

        uvicorn.run(service.app, host=args.host, port=args.port)
        return EXIT_OK

    model_cls, handler, route = COMMANDS[args.command]
    flag_values = {
        key: value for key, value in vars(args).items()
        if key not in ("command", "config", "server")
    }
    if args.command == "eval" and flag_values.get("threads") is None:
        env_threads = os.environ.get("ENFIELD_THREADS")
        if env_threads is not None:
            try:
                flag_values["threads"] = int(env_threads)
            except ValueError:
                raise CliError(EXIT_USAGE, f"ENFIELD_THREADS is not an integer: {env_threads!r}")
    config_values = read_config_file(args.config) if args.config else {}
    request = build_request(model_cls, config_values, flag_values)
    if args.server:
        _dispatch_remote(args.server, route, request)
        return EXIT_OK
    response = handler(request)
    _print_model(response)
    if isinstance(response, schemas.CheckGradResponse) and not response.passed:
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except CliError as exc:
        print(f"enfield: {exc}", file=sys.stderr)
        return exc.code
    except EnfieldError as exc:
        print(f"enfield: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    except FileNotFoundError as exc:
        print(f"enfield: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
