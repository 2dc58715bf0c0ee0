"""Weather field configuration, severity presets and seeded particle sampling.

Every attribute of a weather particle (color, scale, rotation, opacity) is
drawn from a per-type Gaussian; positions are uniform inside the field box.
Field boxes are camera-relative: +x right, +y down, +z forward.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ValidationError

MIN_SCALE = 1e-6  # meters; keeps sampled scales strictly positive
U64_MAX = 2**64 - 1


class WeatherType(enum.Enum):
    SNOW = "snow"
    RAIN = "rain"
    FOG = "fog"

    @classmethod
    def parse(cls, tag: str) -> "WeatherType":
        try:
            return cls(str(tag).lower())
        except ValueError:
            raise ValidationError(
                f"unknown weather type {tag!r}; expected one of "
                f"{[w.value for w in cls]}"
            ) from None


class Severity(enum.Enum):
    LIGHT = "light"
    MODERATE = "moderate"
    HEAVY = "heavy"


# Quantity multipliers relative to the moderate preset.
SEVERITY_MULTIPLIER = {
    Severity.LIGHT: 0.4,
    Severity.MODERATE: 1.0,
    Severity.HEAVY: 2.5,
}


def parse_severity(value: "str | float | Severity") -> "Severity | float":
    """Accept a severity tag or a positive custom multiplier."""
    if isinstance(value, Severity):
        return value
    if isinstance(value, str):
        try:
            return Severity(value.lower())
        except ValueError:
            pass
        try:
            value = float(value)
        except ValueError:
            raise ValidationError(
                f"severity must be light|moderate|heavy or a positive number, got {value!r}"
            ) from None
    mult = float(value)
    if not math.isfinite(mult) or mult <= 0:
        raise ValidationError(f"custom severity multiplier must be > 0, got {value!r}")
    return mult


@dataclass(frozen=True)
class GaussianDist:
    mean: float
    stddev: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.stddev)):
            raise ValidationError(f"non-finite distribution parameters {self}")
        if self.stddev < 0:
            raise ValidationError(f"stddev must be >= 0, got {self.stddev}")


@dataclass(frozen=True)
class AttributeDistributions:
    color: tuple[GaussianDist, GaussianDist, GaussianDist]
    scale: tuple[GaussianDist, GaussianDist, GaussianDist]
    rotation: GaussianDist  # axis-angle magnitude, radians; axis is uniform
    opacity: GaussianDist

    def __post_init__(self):
        if len(self.color) != 3 or len(self.scale) != 3:
            raise ValidationError("color and scale need exactly 3 distributions each")


@dataclass(frozen=True)
class FieldBounds:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.min, float), np.asarray(self.max, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValidationError("bounds min/max must be 3-vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("bounds must be finite")
        for k, axis in enumerate("xyz"):
            if not lo[k] < hi[k]:
                raise ValidationError(
                    f"bounds axis {axis}: min {lo[k]} must be < max {hi[k]}"
                )

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.max, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass(frozen=True)
class VelocityModel:
    direction: tuple[float, float, float] = (0.0, 0.0, 0.0)  # m/s

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise ValidationError(f"velocity must be a finite 3-vector, got {self.direction}")


@dataclass(frozen=True)
class WeatherFieldConfig:
    weather: WeatherType
    dists: AttributeDistributions
    quantity: int
    bounds: FieldBounds
    velocity: VelocityModel = field(default_factory=VelocityModel)
    recycle_offset: float = 0.0
    jitter: float = 0.0  # per-particle velocity stddev, m/s

    def __post_init__(self):
        if isinstance(self.quantity, bool) or not isinstance(self.quantity, (int, np.integer)):
            raise ValidationError(f"quantity must be an integer, got {self.quantity!r}")
        if self.quantity < 1:
            raise ValidationError(f"quantity must be >= 1, got {self.quantity}")
        if not math.isfinite(self.recycle_offset) or self.recycle_offset < 0:
            raise ValidationError(f"recycle_offset must be >= 0, got {self.recycle_offset}")
        if np.any(self.recycle_offset >= self.bounds.extent):
            raise ValidationError(
                f"recycle_offset {self.recycle_offset} must be smaller than every "
                f"field extent {self.bounds.extent.tolist()}"
            )
        if not math.isfinite(self.jitter) or self.jitter < 0:
            raise ValidationError(f"jitter must be >= 0, got {self.jitter}")

    def to_dict(self) -> dict:
        def dist(g: GaussianDist):
            return {"mean": g.mean, "stddev": g.stddev}

        return {
            "weather": self.weather.value,
            "dists": {
                "color": [dist(g) for g in self.dists.color],
                "scale": [dist(g) for g in self.dists.scale],
                "rotation": dist(self.dists.rotation),
                "opacity": dist(self.dists.opacity),
            },
            "quantity": int(self.quantity),
            "bounds": {"min": list(self.bounds.min), "max": list(self.bounds.max)},
            "velocity": {"direction": list(self.velocity.direction)},
            "recycle_offset": self.recycle_offset,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "WeatherFieldConfig":
        """Parse the JSON mirror of a config. Unknown or missing keys are rejected."""
        _check_keys(doc, "config", {"weather", "dists", "quantity", "bounds"},
                    {"velocity", "recycle_offset", "jitter"})
        d = doc["dists"]
        _check_keys(d, "dists", {"color", "scale", "rotation", "opacity"})
        bounds = doc["bounds"]
        _check_keys(bounds, "bounds", {"min", "max"})
        velocity = doc.get("velocity", {"direction": [0.0, 0.0, 0.0]})
        _check_keys(velocity, "velocity", {"direction"})
        try:
            dists = AttributeDistributions(
                color=tuple(_parse_dist(g, "dists.color") for g in d["color"]),
                scale=tuple(_parse_dist(g, "dists.scale") for g in d["scale"]),
                rotation=_parse_dist(d["rotation"], "dists.rotation"),
                opacity=_parse_dist(d["opacity"], "dists.opacity"),
            )
            return cls(
                weather=WeatherType.parse(doc["weather"]),
                dists=dists,
                quantity=doc["quantity"],
                bounds=FieldBounds(_vec3(bounds["min"]), _vec3(bounds["max"])),
                velocity=VelocityModel(_vec3(velocity["direction"])),
                recycle_offset=float(doc.get("recycle_offset", 0.0)),
                jitter=float(doc.get("jitter", 0.0)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed config: {exc}") from exc


def _check_keys(doc, where, required, optional=frozenset()):
    if not isinstance(doc, Mapping):
        raise ValidationError(f"{where}: expected an object, got {type(doc).__name__}")
    unknown = set(doc) - set(required) - set(optional)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise ValidationError(f"{where}: missing keys {sorted(missing)}")


def _parse_dist(doc, where) -> GaussianDist:
    _check_keys(doc, where, {"mean"}, {"stddev"})
    return GaussianDist(float(doc["mean"]), float(doc.get("stddev", 0.0)))


def _vec3(v) -> tuple[float, float, float]:
    v = [float(x) for x in v]
    if len(v) != 3:
        raise ValidationError(f"expected a 3-vector, got {v}")
    return tuple(v)


def _readonly(x, shape_tail) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
        arr.flags.writeable = False
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValidationError(f"expected array of shape (n, {shape_tail}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ParticleSet:
    """Immutable struct-of-arrays holding every live weather Gaussian.

    Rotations are unit quaternions in (w, x, y, z) order.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions, (3,)))
        object.__setattr__(self, "rotations", _readonly(self.rotations, (4,)))
        object.__setattr__(self, "scales", _readonly(self.scales, (3,)))
        object.__setattr__(self, "colors", _readonly(self.colors, (3,)))
        object.__setattr__(self, "opacities", _readonly(self.opacities, ()))
        object.__setattr__(self, "velocities", _readonly(self.velocities, (3,)))
        n = len(self.positions)
        for name in ("rotations", "scales", "colors", "opacities", "velocities"):
            if len(getattr(self, name)) != n:
                raise ValidationError(
                    f"ParticleSet.{name} has length {len(getattr(self, name))}, expected {n}"
                )

    def __len__(self) -> int:
        return len(self.positions)

    def replace(self, **changes) -> "ParticleSet":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        """Check the value-range invariants; raises ValidationError."""
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("rotations must be unit quaternions")
        if np.any(self.scales <= 0):
            raise ValidationError("scales must be strictly positive")
        for name in ("colors", "opacities"):
            a = getattr(self, name)
            if np.any(a < 0) or np.any(a > 1):
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("positions", "velocities"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} must be finite")

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)),
            colors=np.zeros((0, 3)),
            opacities=np.zeros((0,)),
            velocities=np.zeros((0, 3)),
        )


def _dist(mean, std=0.0) -> GaussianDist:
    return GaussianDist(float(mean), float(std))


def _dists3(means, std) -> tuple:
    return tuple(_dist(m, std) for m in means)


# Moderate-severity presets. Other severities scale the quantity only.
_BASE_PRESETS = {
    WeatherType.SNOW: dict(
        dists=AttributeDistributions(
            color=_dists3((0.95, 0.95, 0.96), 0.03),
            scale=_dists3((0.025, 0.025, 0.025), 0.006),
            rotation=_dist(0.0, math.pi),
            opacity=_dist(0.8, 0.1),
        ),
        quantity=6000,
        bounds=FieldBounds((-10.0, -8.0, 0.5), (10.0, 2.0, 25.0)),
        velocity=VelocityModel((0.3, 1.2, 0.0)),
        recycle_offset=0.05,
    ),
    WeatherType.RAIN: dict(
        dists=AttributeDistributions(
            color=(_dist(0.78, 0.02), _dist(0.80, 0.02), _dist(0.85, 0.02)),
            scale=(_dist(0.003, 0.0005), _dist(0.09, 0.015), _dist(0.003, 0.0005)),
            rotation=_dist(0.0, 0.05),
            opacity=_dist(0.3, 0.05),
        ),
        quantity=10000,
        bounds=FieldBounds((-10.0, -8.0, 0.5), (10.0, 2.0, 25.0)),
        velocity=VelocityModel((0.0, 9.0, 0.0)),
        recycle_offset=0.05,
    ),
    WeatherType.FOG: dict(
        dists=AttributeDistributions(
            color=(_dist(0.82, 0.02), _dist(0.83, 0.02), _dist(0.85, 0.02)),
            scale=_dists3((1.2, 1.2, 1.2), 0.3),
            rotation=_dist(0.0, math.pi),
            opacity=_dist(0.08, 0.02),
        ),
        quantity=800,
        bounds=FieldBounds((-15.0, -6.0, 1.0), (15.0, 2.0, 40.0)),
        velocity=VelocityModel((0.3, 0.0, 0.0)),
        recycle_offset=0.5,
    ),
}


def scale_severity(config: WeatherFieldConfig, factor: float) -> WeatherFieldConfig:
    """Scale particle quantity by ``factor`` (rounded half-up, at least 1)."""
    factor = float(factor)
    if not math.isfinite(factor) or factor <= 0:
        raise ValidationError(f"severity factor must be > 0, got {factor}")
    quantity = max(1, int(math.floor(config.quantity * factor + 0.5)))
    return dataclasses.replace(config, quantity=quantity)


def preset(weather: "WeatherType | str", severity: "Severity | float | str" = Severity.MODERATE) -> WeatherFieldConfig:
    if not isinstance(weather, WeatherType):
        weather = WeatherType.parse(weather)
    severity = parse_severity(severity)
    base = WeatherFieldConfig(weather=weather, **_BASE_PRESETS[weather])
    mult = SEVERITY_MULTIPLIER[severity] if isinstance(severity, Severity) else severity
    return scale_severity(base, mult)


def preset_table() -> list[dict]:
    """All nine built-in presets as JSON-ready records."""
    return [
        {"weather": w.value, "severity": s.value, "config": preset(w, s).to_dict()}
        for w in WeatherType
        for s in Severity
    ]


def _check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ValidationError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) <= U64_MAX:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return int(seed)


def axis_angle_to_quat(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    half = 0.5 * np.asarray(angles, dtype=np.float64)
    q = np.empty((len(half), 4))
    q[:, 0] = np.cos(half)
    q[:, 1:] = np.sin(half)[:, None] * axes
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability ~0; map it to +z rather than divide by zero
    bad = norms[:, 0] == 0
    v[bad] = (0.0, 0.0, 1.0)
    norms[bad] = 1.0
    return v / norms


def _draw(rng: np.random.Generator, dists: Sequence[GaussianDist], n: int) -> np.ndarray:
    means = np.array([g.mean for g in dists])
    stds = np.array([g.stddev for g in dists])
    return means + stds * rng.standard_normal((n, len(dists)))


def sample_field(config: WeatherFieldConfig, seed: int, attributes: bool = True) -> ParticleSet:
    """Draw ``config.quantity`` particles in the field's local frame.

    The generator is numpy's PCG64 seeded with ``seed``; draws happen in a
    fixed order (positions, colors, scales, rotation axes, rotation angles,
    opacities, velocity jitter) so the result is a pure function of the
    inputs. With ``attributes=False`` the per-type distributions are ignored
    and colors, scales, rotations and opacities are drawn at random instead
    (attribute-modeling ablation).
    """
    if config.quantity < 1:
        raise ValidationError("quantity must be >= 1")
    rng = np.random.default_rng(_check_seed(seed))
    n = config.quantity
    lo, ext = config.bounds.lo, config.bounds.extent
    positions = lo + rng.random((n, 3)) * ext
    positions = np.minimum(positions, config.bounds.hi)

    if attributes:
        colors = np.clip(_draw(rng, config.dists.color, n), 0.0, 1.0)
        scales = np.maximum(_draw(rng, config.dists.scale, n), MIN_SCALE)
        axes = _unit_vectors(rng, n)
        angles = _draw(rng, [config.dists.rotation], n)[:, 0]
        opacities = np.clip(_draw(rng, [config.dists.opacity], n)[:, 0], 0.0, 1.0)
    else:
        colors = rng.random((n, 3))
        scales = rng.uniform(0.05, 0.5, (n, 3))
        axes = _unit_vectors(rng, n)
        angles = rng.uniform(0.0, 2 * math.pi, n)
        opacities = rng.uniform(0.2, 1.0, n)
    rotations = axis_angle_to_quat(axes, angles)

    velocities = np.broadcast_to(np.asarray(config.velocity.direction, float), (n, 3))
    if config.jitter > 0:
        velocities = velocities + config.jitter * rng.standard_normal((n, 3))

    return ParticleSet(
        positions=positions,
        rotations=rotations,
        scales=scales,
        colors=colors,
        opacities=opacities,
        velocities=velocities,
    )
