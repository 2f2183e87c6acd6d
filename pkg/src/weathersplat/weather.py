"""Physics-driven rain/snow particle systems and Beer-Lambert fog.

Particles live inside an axis-aligned bounding volume in a z-up world and
fall under a constant fall speed plus a global wind vector; snowflakes add a
first-order autoregressive turbulence velocity that produces fluttering.
Each step is deterministic given the system's seed. Emitted particle
Gaussians carry fixed base colors/scales/opacities and are never trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

from .rasterizer import RenderOutput
from .scene import DTYPE, FEATURE_DIM, GaussianPrimitives
from .transforms import quat_from_axis_angle, quat_normalize

RAIN = "rain"
SNOW = "snow"

# published base parameters for the two particle kinds
RAIN_COUNT = 40_000
RAIN_COLOR = (0.7, 0.7, 0.8)
RAIN_SCALE = (0.0025, 0.0025, 0.075)  # long axis is local z
RAIN_OPACITY = 0.13
SNOW_COUNT = 16_000
SNOW_COLOR = (0.9, 0.9, 0.95)
SNOW_SCALE = (0.0064, 0.004, 0.004)  # long axis is local x
SNOW_OPACITY = 0.2

# fall speeds are not published; these are physically typical defaults
RAIN_FALL_SPEED = 9.0   # m/s
SNOW_FALL_SPEED = 1.5   # m/s

DEFAULT_TURBULENCE_PERSISTENCE = 0.9  # per step at 30 Hz
DEFAULT_TURBULENCE_SIGMA = 0.4        # m/s
DEFAULT_DT = 1.0 / 30.0

FOG_DENSITY = 0.2
FOG_COLOR = (0.8, 0.8, 0.85)
FOG_SKY_DEPTH = 500.0  # substitute depth for pixels with ~no coverage
FOG_ALPHA_FLOOR = 0.01


@dataclass
class WindParams:
    """Global wind: magnitude (m/s), tilt (elevation from horizontal, rad), azimuth (rad)."""

    magnitude: float = 0.0
    tilt: float = 0.0
    azimuth: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("wind magnitude must be >= 0")


def wind_vector(p: WindParams) -> Tensor:
    """Wind velocity in the z-up world; positive tilt bends the wind downward."""
    ct = math.cos(p.tilt)
    return torch.tensor(
        [p.magnitude * ct * math.cos(p.azimuth),
         p.magnitude * ct * math.sin(p.azimuth),
         -p.magnitude * math.sin(p.tilt)],
        dtype=DTYPE,
    )


@dataclass
class BoundingBox:
    """Axis-aligned box, world meters."""

    lo: Tensor  # (3,)
    hi: Tensor  # (3,)

    def __post_init__(self):
        self.lo = torch.as_tensor(self.lo, dtype=DTYPE)
        self.hi = torch.as_tensor(self.hi, dtype=DTYPE)
        if not bool((self.hi > self.lo).all()):
            raise ValueError(f"degenerate bounding volume: lo={self.lo.tolist()} hi={self.hi.tolist()}")

    def size(self) -> Tensor:
        return self.hi - self.lo

    def contains(self, points: Tensor, tol: float = 1e-9) -> Tensor:
        return ((points >= self.lo - tol) & (points <= self.hi + tol)).all(dim=-1)


def particle_bounds(positions: Tensor, horizontal_margin: float = 0.10,
                    top_extension: float = 15.0) -> BoundingBox:
    """Default weather volume: 1st-99th percentile box of the scene positions,
    widened 10% horizontally and extended upward so particles enter from above."""
    lo = torch.quantile(positions, 0.01, dim=0)
    hi = torch.quantile(positions, 0.99, dim=0)
    span = (hi - lo).clamp_min(1.0)
    lo = lo.clone()
    hi = hi.clone()
    lo[:2] -= horizontal_margin * span[:2]
    hi[:2] += horizontal_margin * span[:2]
    hi[2] += top_extension
    return BoundingBox(lo, hi)


@dataclass
class ParticleSystem:
    """Rain or snow particle state plus its motion parameters."""

    kind: str
    positions: Tensor           # (N, 3) meters
    turbulence: Tensor          # (N, 3) m/s; stays zero for rain
    volume: BoundingBox
    fall_speed: float
    wind: WindParams
    turbulence_persistence: float = DEFAULT_TURBULENCE_PERSISTENCE
    turbulence_sigma: float = DEFAULT_TURBULENCE_SIGMA
    base_color: tuple[float, float, float] = RAIN_COLOR
    base_scale: tuple[float, float, float] = RAIN_SCALE
    base_opacity: float = RAIN_OPACITY
    seed: int = 0
    generator: torch.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in (RAIN, SNOW):
            raise ValueError(f"particle kind must be {RAIN!r} or {SNOW!r}")
        if self.positions.shape != self.turbulence.shape:
            raise ValueError("positions and turbulence states must match in shape")
        if self.generator is None:
            self.generator = torch.Generator().manual_seed(self.seed)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    def velocity(self) -> Tensor:
        """Per-particle velocity (N, 3): fall + wind (+ current turbulence for snow)."""
        base = wind_vector(self.wind) + torch.tensor([0.0, 0.0, -self.fall_speed], dtype=DTYPE)
        v = base.expand(len(self), 3)
        if self.kind == SNOW:
            v = v + self.turbulence
        return v

    def step(self, dt: float = DEFAULT_DT) -> "ParticleSystem":
        return step(self, dt)

    def emit_gaussians(self) -> tuple[GaussianPrimitives, Tensor]:
        return emit_gaussians(self)


def spawn(kind: str, count: int | None = None, volume: BoundingBox | None = None,
          seed: int = 0, *, fall_speed: float | None = None,
          wind: WindParams | None = None, **overrides) -> ParticleSystem:
    """Create a particle system with positions uniform in `volume`.

    Counts, colors, scales, and opacities default to the published values for
    each kind; keyword overrides tune intensity (count, base_opacity, ...).
    """
    if count is None:
        count = RAIN_COUNT if kind == RAIN else SNOW_COUNT
    if count < 0:
        raise ValueError("particle count must be >= 0")
    if volume is None:
        volume = BoundingBox(torch.tensor([-10.0, -10.0, 0.0]), torch.tensor([10.0, 10.0, 15.0]))
    defaults = dict(
        base_color=RAIN_COLOR if kind == RAIN else SNOW_COLOR,
        base_scale=RAIN_SCALE if kind == RAIN else SNOW_SCALE,
        base_opacity=RAIN_OPACITY if kind == RAIN else SNOW_OPACITY,
    )
    defaults.update(overrides)

    gen = torch.Generator().manual_seed(seed)
    positions = volume.lo + torch.rand(count, 3, generator=gen, dtype=DTYPE) * volume.size()
    return ParticleSystem(
        kind=kind,
        positions=positions,
        turbulence=torch.zeros(count, 3, dtype=DTYPE),
        volume=volume,
        fall_speed=(RAIN_FALL_SPEED if kind == RAIN else SNOW_FALL_SPEED) if fall_speed is None else fall_speed,
        wind=wind or WindParams(),
        seed=seed,
        generator=gen,
        **defaults,
    )


def step(ps: ParticleSystem, dt: float = DEFAULT_DT) -> ParticleSystem:
    """Advance particles by dt seconds (in place; returns the system).

    Snow turbulence follows v <- rho*v + sigma*xi with per-axis standard
    normal noise. Particles leaving the volume wrap on the violated axis;
    exiting through the bottom respawns at the top with fresh horizontal
    coordinates.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = len(ps)
    if n == 0:
        return ps

    if ps.kind == SNOW:
        noise = torch.randn(n, 3, generator=ps.generator, dtype=DTYPE)
        ps.turbulence.mul_(ps.turbulence_persistence).add_(ps.turbulence_sigma * noise)

    ps.positions += ps.velocity() * dt

    lo, hi = ps.volume.lo, ps.volume.hi
    size = ps.volume.size()
    fell_out = ps.positions[:, 2] < lo[2]
    if bool(fell_out.any()):
        fresh = lo[:2] + torch.rand(int(fell_out.sum()), 2, generator=ps.generator, dtype=DTYPE) * size[:2]
        ps.positions[fell_out, 0:2] = fresh
    # wrap only the axes that actually left the box; in-range coordinates
    # must stay bit-exact (gravity-only fall leaves x, y untouched)
    outside = (ps.positions < lo) | (ps.positions > hi)
    if bool(outside.any()):
        wrapped = lo + torch.remainder(ps.positions - lo, size)
        ps.positions = torch.where(outside, wrapped, ps.positions)
    return ps


def emit_gaussians(ps: ParticleSystem) -> tuple[GaussianPrimitives, Tensor]:
    """Particle Gaussians plus their fixed colors, ready to append to a flatten.

    Rain emits one elongated Gaussian per particle with the long (local z)
    axis aligned to the current velocity. Snow emits three co-centered
    ellipsoids per particle whose long (local x) axes sit 60 degrees apart
    in the horizontal plane, forming a basic crystal.
    """
    n = len(ps)
    color = torch.tensor(ps.base_color, dtype=DTYPE)
    log_scale = torch.log(torch.tensor(ps.base_scale, dtype=DTYPE))
    opacity_logit = _logit(ps.base_opacity)

    if ps.kind == RAIN:
        v = ps.velocity()[0] if n else torch.zeros(3, dtype=DTYPE)
        rot = _align_z_to(v)
        prims = GaussianPrimitives(
            positions=ps.positions.clone(),
            log_scales=log_scale.expand(n, 3).clone(),
            rotations=rot.expand(n, 4).clone(),
            opacity_logits=torch.full((n,), opacity_logit, dtype=DTYPE),
            features=torch.zeros(n, FEATURE_DIM, dtype=DTYPE),
        )
        return prims, color.expand(n, 3).clone()

    z_axis = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)
    rots = torch.stack([quat_from_axis_angle(z_axis, math.radians(a)) for a in (0.0, 60.0, 120.0)])
    prims = GaussianPrimitives(
        positions=ps.positions.repeat_interleave(3, dim=0),
        log_scales=log_scale.expand(3 * n, 3).clone(),
        rotations=rots.repeat(n, 1),
        opacity_logits=torch.full((3 * n,), opacity_logit, dtype=DTYPE),
        features=torch.zeros(3 * n, FEATURE_DIM, dtype=DTYPE),
    )
    return prims, color.expand(3 * n, 3).clone()


def _logit(p: float, eps: float = 1e-7) -> float:
    p = min(max(p, eps), 1 - eps)
    return math.log(p / (1 - p))


def _align_z_to(v: Tensor, eps: float = 1e-9) -> Tensor:
    """Unit quaternion rotating local +z onto direction v (identity when v ~ 0)."""
    norm = float(v.norm())
    if norm < eps:
        return torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    d = v / norm
    z = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)
    dot = float((z * d).sum())
    if dot < -1.0 + 1e-12:
        # antiparallel: 180 degrees about x
        return torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=DTYPE)
    # half-angle construction: q = normalize([1 + z.d, z x d])
    xyz = torch.cross(z, d, dim=0)
    q = torch.cat([torch.tensor([1.0 + dot], dtype=DTYPE), xyz])
    return quat_normalize(q)


@dataclass
class FogParams:
    """Beer-Lambert fog: transmittance exp(-density * depth) toward a global color."""

    density: float = FOG_DENSITY
    color: tuple[float, float, float] = FOG_COLOR
    sky_depth: float = FOG_SKY_DEPTH

    def __post_init__(self):
        if self.density < 0:
            raise ValueError("fog density must be >= 0")
        if any(not (0.0 <= c <= 1.0) for c in self.color):
            raise ValueError("fog color channels must lie in [0, 1]")


def apply_fog(out: RenderOutput, fog: FogParams) -> RenderOutput:
    """Blend each pixel toward the fog color by its rendered depth.

    Pixels with alpha below 0.01 (essentially sky) use the substitute
    sky depth instead of the undershooting blended depth.
    """
    depth = torch.where(out.alpha > FOG_ALPHA_FLOOR, out.depth,
                        torch.full_like(out.depth, fog.sky_depth))
    transmittance = torch.exp(-fog.density * depth).unsqueeze(-1)
    fog_color = torch.tensor(fog.color, dtype=out.rgb.dtype)
    return replace(out, rgb=transmittance * out.rgb + (1.0 - transmittance) * fog_color)
