"""Analytic geometry and flow oracles for the synthetic benchmarks.

Circular bodies give exact signed distances, and potential flow with
circulation gives an exact pressure field, so every prediction downstream can
be scored against closed-form truth.

Sign conventions: the circulation parameter is positive for counter-clockwise
circulation (the vortex term of the complex potential is ``-i*gamma/(2*pi)
log(zeta)``), and the lift coefficient is reported along the axis 90 degrees
clockwise from the freestream, so that positive circulation yields positive
lift equal to ``gamma / (U r)`` for a circle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError

Array = np.ndarray

Box = tuple[tuple[float, float], tuple[float, float]]

DEFAULT_DOMAIN: Box = ((-2.0, 2.0), (-2.0, 2.0))


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"circle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Geometry:
    """One or more non-overlapping circular bodies inside a rectangular domain."""

    bodies: tuple[Circle, ...]
    domain: Box = DEFAULT_DOMAIN

    def __post_init__(self):
        if not self.bodies:
            raise ConfigError("geometry needs at least one body")
        (x0, x1), (y0, y1) = self.domain
        for body in self.bodies:
            cx, cy = body.center
            if not (x0 + body.radius <= cx <= x1 - body.radius
                    and y0 + body.radius <= cy <= y1 - body.radius):
                raise GeometryError(f"body at {body.center} r={body.radius} leaves the domain")
        for i, a in enumerate(self.bodies):
            for b in self.bodies[i + 1:]:
                gap = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
                if gap <= a.radius + b.radius:
                    raise GeometryError("bodies overlap or touch")


@dataclass(frozen=True)
class FlowCase:
    """Freestream + circulation around a single circular body."""

    speed: float        # U > 0
    angle: float        # angle of attack, radians
    circulation: float  # counter-clockwise positive
    geometry: Geometry

    def __post_init__(self):
        if self.speed <= 0:
            raise ConfigError(f"freestream speed must be positive, got {self.speed}")
        if not np.isfinite(self.circulation):
            raise ConfigError("circulation must be finite")
        if len(self.geometry.bodies) != 1:
            raise ConfigError("potential flow cases use a single body")

    @property
    def body(self) -> Circle:
        return self.geometry.bodies[0]

    @property
    def mu(self) -> Array:
        """Global conditioning vector: inflow velocity components + circulation."""
        return np.array([
            self.speed * np.cos(self.angle),
            self.speed * np.sin(self.angle),
            self.circulation,
        ])

    def lift_coefficient_exact(self) -> float:
        """Kutta-Joukowski closed form under this package's conventions."""
        return self.circulation / (self.speed * self.body.radius)


def sdf(geometry: Geometry, points: Array) -> Array:
    """Signed distance to the nearest body boundary; negative inside."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    dists = np.stack([
        np.hypot(pts[:, 0] - b.center[0], pts[:, 1] - b.center[1]) - b.radius
        for b in geometry.bodies
    ])
    out = dists.min(axis=0)
    return out[0] if squeeze else out


def potential_flow(case: FlowCase, points: Array) -> tuple[Array, Array]:
    """Velocity and pressure coefficient at points strictly outside the body.

    Points on the boundary are allowed (the velocity is finite there); points
    inside raise.  Returns ``(velocity (N, 2), cp (N,))``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    body = case.body
    zeta = (pts[:, 0] - body.center[0]) + 1j * (pts[:, 1] - body.center[1])
    r = np.abs(zeta)
    inside = r < body.radius * (1 - 1e-12)
    if np.any(inside):
        raise GeometryError(f"point index {int(np.argmax(inside))} lies inside the body")
    phase = np.exp(-1j * case.angle)
    dw = case.speed * phase * (1.0 - body.radius**2 / (phase**2 * zeta**2)) \
        - 1j * case.circulation / (2 * np.pi * zeta)
    velocity = np.stack([dw.real, -dw.imag], axis=1)  # conj(dw/dzeta) = u + iv
    cp = 1.0 - (velocity[:, 0]**2 + velocity[:, 1]**2) / case.speed**2
    return velocity, cp


def surface_points(body: Circle, n: int, start_angle: float = 0.0) -> Array:
    """``n`` equally spaced boundary points, counter-clockwise from start_angle."""
    theta = start_angle + 2 * np.pi * np.arange(n) / n
    return np.stack([
        body.center[0] + body.radius * np.cos(theta),
        body.center[1] + body.radius * np.sin(theta),
    ], axis=1)


def _near_field_sample(rng: np.random.Generator, body: Circle) -> Array:
    # Uniform in area over the annulus radius..3*radius (points within 2r of the boundary).
    u = rng.uniform(0.0, 1.0)
    rad = body.radius * np.sqrt(1.0 + 8.0 * u)
    ang = rng.uniform(0.0, 2 * np.pi)
    return np.array([body.center[0] + rad * np.cos(ang), body.center[1] + rad * np.sin(ang)])


def sample_mesh(
    geometry: Geometry,
    n_total: int,
    n_surface: int,
    rng: np.random.Generator,
    max_attempts: int = 10_000_000,
) -> tuple[Array, Array]:
    """Point cloud refined towards the bodies, plus a boolean surface mask.

    Surface points are equally spaced on each body (split proportionally to
    perimeter, ordered by angle).  Volume points mix 50% uniform over the free
    domain with 50% drawn near a body, rejection-sampled to stay outside all
    bodies and inside the domain.
    """
    if n_surface >= n_total:
        raise ConfigError(f"need n_surface < n_total, got {n_surface} >= {n_total}")
    if n_surface < 0:
        raise ConfigError("n_surface must be non-negative")

    perims = np.array([b.radius for b in geometry.bodies], dtype=np.float64)
    counts = np.floor(n_surface * perims / perims.sum()).astype(int)
    while counts.sum() < n_surface:
        counts[int(np.argmax(perims))] += 1
        perims[int(np.argmax(perims))] *= 0.999  # spread remainders across bodies
    surface = [surface_points(b, int(k)) for b, k in zip(geometry.bodies, counts) if k > 0]

    (x0, x1), (y0, y1) = geometry.domain
    n_volume = n_total - n_surface
    volume = np.empty((n_volume, 2))
    filled = 0
    attempts = 0
    while filled < n_volume:
        attempts += 1
        if attempts > max_attempts:
            raise GeometryError(f"mesh rejection sampling failed after {max_attempts} attempts")
        if rng.uniform() < 0.5:
            pt = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        else:
            body = geometry.bodies[rng.integers(len(geometry.bodies))]
            pt = _near_field_sample(rng, body)
            if not (x0 <= pt[0] <= x1 and y0 <= pt[1] <= y1):
                continue
        if sdf(geometry, pt) <= 0:
            continue
        volume[filled] = pt
        filled += 1

    coords = np.concatenate(surface + [volume], axis=0) if surface else volume
    mask = np.zeros(n_total, dtype=bool)
    mask[:n_surface] = True
    return coords, mask
