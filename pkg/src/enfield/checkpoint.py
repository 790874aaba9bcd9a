"""Binary checkpoint format and model (de)serialisation.

Layout of an ``.enfc`` file, all little-endian:

    magic "ENFC" | version u32 | metadata length u32 | metadata UTF-8
    tensor count u32
    per tensor: name length u16 | name UTF-8 | rank u32 | extents u32... | f32 data
    crc32 u32 over everything before it

Metadata is ``key=value`` lines.  Tensors are stored as float32 and sorted by
name, and metadata keys are sorted too, so serialisation is canonical:
save -> load -> save reproduces the file byte for byte.  Norm statistics are
embedded in metadata using ``repr`` floats, which round-trip float64 exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import SA_WEIGHT_NAMES, DecoderParams, SelfAttentionParams
from .encoder import EncoderState
from .errors import ConfigError, DataError
from .field import ENF_WEIGHT_NAMES, EnfParams
from .model import ModelConfig

Array = np.ndarray

ENFC_MAGIC = b"ENFC"
ENFC_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to rebuild a model: metadata + named float32 tensors."""

    metadata: dict[str, str]
    tensors: dict[str, Array]

    def __post_init__(self):
        tensors = {name: np.ascontiguousarray(t, dtype=np.float32) for name, t in self.tensors.items()}
        object.__setattr__(self, "tensors", tensors)
        for key, value in self.metadata.items():
            if "=" in key or "\n" in key or "\n" in value:
                raise ConfigError(f"metadata key/value may not contain '=' or newlines: {key!r}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta_text = "\n".join(f"{k}={ckpt.metadata[k]}" for k in sorted(ckpt.metadata))
    meta_bytes = meta_text.encode("utf-8")
    parts = [ENFC_MAGIC, struct.pack("<II", ENFC_VERSION, len(meta_bytes)), meta_bytes]
    names = sorted(ckpt.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = ckpt.tensors[name]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.astype("<f4").tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.raw):
            raise DataError(f"{self.path}: truncated reading {what} at offset {self.offset}")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated at offset {len(raw)}")
    stored_crc, = struct.unpack("<I", raw[-4:])
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise DataError(f"{path}: CRC mismatch at offset {len(raw) - 4} "
                        f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})")
    r = _Reader(raw[:-4], path)
    if r.take(4, "magic") != ENFC_MAGIC:
        raise DataError(f"{path}: bad magic at offset 0")
    version = r.u32("version")
    if version != ENFC_VERSION:
        raise DataError(f"{path}: unsupported version {version} at offset 4")
    meta_len = r.u32("metadata length")
    metadata: dict[str, str] = {}
    meta_text = r.take(meta_len, "metadata").decode("utf-8")
    if meta_text:
        for line in meta_text.split("\n"):
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}: malformed metadata line {line!r}")
            metadata[key] = value
    tensors: dict[str, Array] = {}
    count = r.u32("tensor count")
    for _ in range(count):
        name = r.take(r.u16("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).copy()
    if r.offset != len(r.raw):
        raise DataError(f"{path}: {len(r.raw) - r.offset} trailing bytes at offset {r.offset}")
    return Checkpoint(metadata=metadata, tensors=tensors)


# ---------------------------------------------------------------------------
# Model <-> checkpoint
# ---------------------------------------------------------------------------

def _pack_vector(values: Array) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).reshape(-1))


def _unpack_vector(text: str) -> Array:
    if not text:
        return np.zeros(0)
    return np.array([float(part) for part in text.split(",")])


def stats_to_metadata(stats) -> dict[str, str]:
    return {
        "stats.out_mean": _pack_vector(stats.out_mean),
        "stats.out_std": _pack_vector(stats.out_std),
        "stats.coord_min": _pack_vector(stats.coord_min),
        "stats.coord_max": _pack_vector(stats.coord_max),
        "stats.mu_mean": _pack_vector(stats.mu_mean),
        "stats.mu_std": _pack_vector(stats.mu_std),
    }


def stats_from_metadata(meta: dict[str, str]):
    from .training import NormStats  # deferred: training imports this module

    try:
        return NormStats(
            out_mean=_unpack_vector(meta["stats.out_mean"]),
            out_std=_unpack_vector(meta["stats.out_std"]),
            coord_min=_unpack_vector(meta["stats.coord_min"]),
            coord_max=_unpack_vector(meta["stats.coord_max"]),
            mu_mean=_unpack_vector(meta["stats.mu_mean"]),
            mu_std=_unpack_vector(meta["stats.mu_std"]),
        )
    except KeyError as exc:
        raise DataError(f"checkpoint metadata missing {exc.args[0]}") from exc


def build_checkpoint(
    config: ModelConfig,
    stats,
    positions: Array,
    encoder_params: EnfParams,
    decoder_params: DecoderParams | None = None,
    extra_metadata: dict[str, str] | None = None,
) -> Checkpoint:
    metadata = {"format": "enfield-checkpoint", "kind": "full" if decoder_params else "encoder"}
    metadata.update(config.to_metadata())
    metadata.update(stats_to_metadata(stats))
    if extra_metadata:
        metadata.update(extra_metadata)
    tensors: dict[str, Array] = {"positions": positions, "enc.fourier": encoder_params.fourier}
    for name, w in encoder_params.weights().items():
        tensors[f"enc.{name}"] = w
    if decoder_params is not None:
        tensors["dec.fourier"] = decoder_params.field.fourier
        for name, w in decoder_params.weights().items():
            tensors[f"dec.{name}"] = w
    return Checkpoint(metadata=metadata, tensors=tensors)


@dataclass(frozen=True)
class LoadedModel:
    config: ModelConfig
    stats: object  # NormStats
    encoder: EncoderState
    decoder: DecoderParams | None

    @property
    def has_decoder(self) -> bool:
        return self.decoder is not None


def model_from_checkpoint(ckpt: Checkpoint) -> LoadedModel:
    config = ModelConfig.from_metadata(ckpt.metadata)
    stats = stats_from_metadata(ckpt.metadata)

    def tensor(name: str) -> Array:
        try:
            return ckpt.tensors[name].astype(np.float64)
        except KeyError as exc:
            raise DataError(f"checkpoint is missing tensor {name!r}") from exc

    enc = EnfParams(
        fourier=tensor("enc.fourier"),
        sigma=config.sigma,
        heads=config.heads,
        **{name: tensor(f"enc.{name}") for name in ENF_WEIGHT_NAMES},
    )
    encoder = EncoderState(
        params=enc,
        positions=tensor("positions"),
        inner_steps=config.inner_steps,
        inner_lr=config.inner_lr,
    )
    decoder = None
    if ckpt.metadata.get("kind") == "full":
        blocks = tuple(
            SelfAttentionParams(**{name: tensor(f"dec.sa{i}.{name}") for name in SA_WEIGHT_NAMES})
            for i in range(config.attention_blocks)
        )
        field = EnfParams(
            fourier=tensor("dec.fourier"),
            sigma=config.sigma,
            heads=config.heads,
            **{name: tensor(f"dec.field.{name}") for name in ENF_WEIGHT_NAMES},
        )
        decoder = DecoderParams(blocks=blocks, field=field)
    return LoadedModel(config=config, stats=stats, encoder=encoder, decoder=decoder)
