"""Samples, the on-disk dataset format, and the synthetic dataset generators.

One sample = one ``.enfd`` file:

    magic "ENFD" | version u32 | N u32 | d u16 | n_a u16 | n_u u16 | l_mu u16
    coords f32[N*d] | a f32[N*n_a] | u f32[N*n_u] | mu f32[l_mu] | mask u8[N]
    crc32 u32 of everything before it

All integers and floats little-endian.  A manifest is plain text with
"[train]" / "[test]" section headers followed by one relative path per line.

Generated arrays are quantised to float32 at creation so the in-memory dataset
and its files are exactly interchangeable.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GeometryError
from .physics import (
    DEFAULT_DOMAIN,
    Box,
    Circle,
    FlowCase,
    Geometry,
    potential_flow,
    sample_mesh,
    sdf,
)

Array = np.ndarray

ENFD_MAGIC = b"ENFD"
ENFD_VERSION = 1


@dataclass(frozen=True)
class FieldSample:
    """Mesh coordinates with input/output fields, global parameters and mask."""

    coords: Array  # (N, d)
    a: Array       # (N, n_a) input field
    u: Array       # (N, n_u) output field
    mu: Array      # (l_mu,) global parameters
    mask: Array    # (N,) bool, True on body surfaces

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        n = coords.shape[0]
        if coords.ndim != 2 or n < 1:
            raise DataError(f"coords must be (N, d), got {coords.shape}")
        for name, arr in (("a", a), ("u", u)):
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DataError(f"{name} must be (N, channels), got {arr.shape} for N={n}")
        if mask.shape[0] != n:
            raise DataError(f"mask length {mask.shape[0]} != N={n}")
        for name, arr in (("coords", coords), ("a", a), ("u", u), ("mu", mu)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "mask", mask)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def subset(self, indices: Array) -> "FieldSample":
        return FieldSample(
            coords=self.coords[indices],
            a=self.a[indices],
            u=self.u[indices],
            mu=self.mu,
            mask=self.mask[indices],
        )

    def quantized(self) -> "FieldSample":
        """Round all floats to float32-representable values (the file precision)."""
        f32 = lambda x: x.astype(np.float32).astype(np.float64)
        return FieldSample(f32(self.coords), f32(self.a), f32(self.u), f32(self.mu), self.mask)


def write_sample(path, sample: FieldSample) -> None:
    n, d = sample.coords.shape
    header = ENFD_MAGIC + struct.pack(
        "<IIHHHH", ENFD_VERSION, n, d, sample.a.shape[1], sample.u.shape[1], sample.mu.shape[0])
    body = b"".join([
        sample.coords.astype("<f4").tobytes(),
        sample.a.astype("<f4").tobytes(),
        sample.u.astype("<f4").tobytes(),
        sample.mu.astype("<f4").tobytes(),
        sample.mask.astype(np.uint8).tobytes(),
    ])
    payload = header + body
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_sample(path) -> FieldSample:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DataError(f"{path}: truncated at offset {len(raw)} (header incomplete)")
    if raw[:4] != ENFD_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, n, d, n_a, n_u, l_mu = struct.unpack("<IIHHHH", raw[4:20])
    if version != ENFD_VERSION:
        raise DataError(f"{path}: unsupported version {version} at offset 4")
    counts = [n * d, n * n_a, n * n_u, l_mu]
    expected = 20 + 4 * sum(counts) + n + 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, file has {len(raw)} (truncated or padded)")
    stored_crc, = struct.unpack("<I", raw[-4:])
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise DataError(f"{path}: CRC mismatch at offset {len(raw) - 4} "
                        f"(stored {stored_crc:#010x}, computed {actual_crc:#010x})")
    offset = 20
    blobs = []
    for count in counts:
        blobs.append(np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64))
        offset += 4 * count
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).astype(bool)
    return FieldSample(
        coords=blobs[0].reshape(n, d),
        a=blobs[1].reshape(n, n_a),
        u=blobs[2].reshape(n, n_u),
        mu=blobs[3],
        mask=mask,
    )


def write_manifest(path, train: list[str], test: list[str]) -> None:
    lines = ["[train]"] + list(train) + ["[test]"] + list(test)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[list[str], list[str]]:
    sections: dict[str, list[str]] = {"train": [], "test": []}
    current: list[str] | None = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line == "[train]":
            current = sections["train"]
        elif line == "[test]":
            current = sections["test"]
        elif line.startswith("["):
            raise DataError(f"{path}:{lineno}: unknown manifest section {line!r}")
        else:
            if current is None:
                raise DataError(f"{path}:{lineno}: entry before any section header")
            current.append(line)
    return sections["train"], sections["test"]


def load_split(data_dir) -> tuple[list[FieldSample], list[FieldSample]]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"no manifest.txt under {data_dir}")
    train_paths, test_paths = read_manifest(manifest)
    train = [read_sample(data_dir / p) for p in train_paths]
    test = [read_sample(data_dir / p) for p in test_paths]
    return train, test


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowDatasetConfig:
    """Cylinder-flow task: SDF in, pressure coefficient out, mu = (Ux, Uy, gamma)."""

    n_train: int = 64
    n_test: int = 16
    points: int = 2048
    surface_points: int = 128
    radius_range: tuple[float, float] = (0.2, 0.5)
    speed_range: tuple[float, float] = (0.5, 1.5)
    angle_range_deg: tuple[float, float] = (-10.0, 15.0)
    circulation_range: tuple[float, float] = (-2.0, 2.0)
    domain: Box = DEFAULT_DOMAIN
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_test", "points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.surface_points < self.points:
            raise ConfigError("need 0 <= surface_points < points")
        for name in ("radius_range", "speed_range", "angle_range_deg", "circulation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is inverted: ({lo}, {hi})")


def draw_flow_case(config: FlowDatasetConfig, rng: np.random.Generator) -> FlowCase:
    radius = rng.uniform(*config.radius_range)
    speed = rng.uniform(*config.speed_range)
    angle = np.deg2rad(rng.uniform(*config.angle_range_deg))
    gamma = rng.uniform(*config.circulation_range)
    geometry = Geometry((Circle((0.0, 0.0), radius),), config.domain)
    return FlowCase(speed=speed, angle=angle, circulation=gamma, geometry=geometry)


def flow_sample(case: FlowCase, n_points: int, n_surface: int, rng: np.random.Generator) -> FieldSample:
    coords, mask = sample_mesh(case.geometry, n_points, n_surface, rng)
    a = sdf(case.geometry, coords)[:, None]
    _, cp = potential_flow(case, coords)
    return FieldSample(coords=coords, a=a, u=cp[:, None], mu=case.mu, mask=mask)


def _spawn_rngs(seed: int, labels: list[str]) -> dict[str, np.random.Generator]:
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(len(labels))
    return {label: np.random.default_rng(child) for label, child in zip(labels, children)}


def gen_flow_dataset(out_dir, config: FlowDatasetConfig) -> tuple[list[str], list[str]]:
    """Write the flow dataset and its manifest; returns the relative paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rngs = _spawn_rngs(config.seed, ["train", "test"])
    splits: dict[str, list[str]] = {"train": [], "test": []}
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        rng = rngs[split]
        for i in range(count):
            case = draw_flow_case(config, rng)
            sample = flow_sample(case, config.points, config.surface_points, rng).quantized()
            name = f"{split}_{i:04d}.enfd"
            write_sample(out_dir / name, sample)
            splits[split].append(name)
    write_manifest(out_dir / "manifest.txt", splits["train"], splits["test"])
    return splits["train"], splits["test"]


@dataclass(frozen=True)
class MultibodyDatasetConfig:
    """Two-body SDF reconstruction task: the target field equals the input."""

    n_train: int = 160
    n_test: int = 40
    points: int = 1024
    surface_points: int = 96
    main_center: tuple[float, float] = (-0.5, 0.0)
    main_radius: float = 0.4
    secondary_radius: float = 0.15
    offset_range: tuple[float, float] = (0.65, 1.1)
    angle_range_deg: tuple[float, float] = (-40.0, 40.0)
    domain: Box = DEFAULT_DOMAIN
    seed: int = 0

    def __post_init__(self):
        if self.offset_range[0] <= self.main_radius + self.secondary_radius:
            raise ConfigError("offset range lower bound would overlap the bodies")
        if self.n_train < 1 or self.n_test < 1 or self.points < 2:
            raise ConfigError("counts must be positive")


def draw_multibody_geometry(config: MultibodyDatasetConfig, rng: np.random.Generator,
                            max_attempts: int = 1000) -> Geometry:
    main = Circle(config.main_center, config.main_radius)
    for _ in range(max_attempts):
        offset = rng.uniform(*config.offset_range)
        angle = np.deg2rad(rng.uniform(*config.angle_range_deg))
        center = (config.main_center[0] + offset * np.cos(angle),
                  config.main_center[1] + offset * np.sin(angle))
        try:
            return Geometry((main, Circle(center, config.secondary_radius)), config.domain)
        except GeometryError:
            continue  # overlap or out of domain: redraw
    raise GeometryError(f"could not place the secondary body in {max_attempts} attempts")


def multibody_sample(geometry: Geometry, n_points: int, n_surface: int,
                     rng: np.random.Generator) -> FieldSample:
    coords, mask = sample_mesh(geometry, n_points, n_surface, rng)
    a = sdf(geometry, coords)[:, None]
    return FieldSample(coords=coords, a=a, u=a.copy(), mu=np.zeros(0), mask=mask)


def gen_multibody_dataset(out_dir, config: MultibodyDatasetConfig) -> tuple[list[str], list[str]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rngs = _spawn_rngs(config.seed, ["train", "test"])
    splits: dict[str, list[str]] = {"train": [], "test": []}
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        rng = rngs[split]
        for i in range(count):
            geometry = draw_multibody_geometry(config, rng)
            sample = multibody_sample(geometry, config.points, config.surface_points, rng).quantized()
            name = f"{split}_{i:04d}.enfd"
            write_sample(out_dir / name, sample)
            splits[split].append(name)
    write_manifest(out_dir / "manifest.txt", splits["train"], splits["test"])
    return splits["train"], splits["test"]


def reconstruct_flow_case(sample: FieldSample, domain: Box = DEFAULT_DOMAIN) -> FlowCase:
    """Recover the generating flow case of a single-body sample.

    The body center/radius come from the surface points; speed, angle and
    circulation come from mu.  Accurate to file precision.
    """
    surf = sample.coords[sample.mask]
    if surf.shape[0] < 3:
        raise DataError("sample has too few surface points to recover the body")
    center = surf.mean(axis=0)
    radius = float(np.mean(np.hypot(surf[:, 0] - center[0], surf[:, 1] - center[1])))
    ux, uy, gamma = sample.mu
    speed = float(np.hypot(ux, uy))
    angle = float(np.arctan2(uy, ux))
    geometry = Geometry((Circle((float(center[0]), float(center[1])), radius),), domain)
    return FlowCase(speed=speed, angle=angle, circulation=float(gamma), geometry=geometry)


def downsample(sample: FieldSample, k: int, rng: np.random.Generator) -> FieldSample:
    """Uniform random subset of k points without replacement (surface mask kept).

    k above the mesh size clamps with a warning; k equal to it yields a random
    permutation of the full sample.
    """
    n = sample.n_points
    if k < 1:
        raise ConfigError("downsample count must be positive")
    if k > n:
        warnings.warn(f"downsample k={k} exceeds mesh size {n}; clamping", stacklevel=2)
        k = n
    indices = rng.choice(n, size=k, replace=False)
    return sample.subset(indices)
