import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DT
from weathersplat.rasterizer import RenderOutput
from weathersplat.transforms import quat_rotate
from weathersplat.weather import (BoundingBox, FogParams, ParticleSystem,
                                  WindParams, apply_fog, emit_gaussians,
                                  particle_bounds, spawn, step, wind_vector)
import weathersplat.weather as weather


def unit_box(height=8.0):
    return BoundingBox(torch.tensor([0.0, 0.0, 0.0]), torch.tensor([4.0, 4.0, height]))


class TestWind:
    def test_zero_magnitude(self):
        assert torch.equal(wind_vector(WindParams(0.0, 0.7, 1.3)), torch.zeros(3, dtype=DT))

    def test_horizontal_along_x(self):
        assert torch.allclose(wind_vector(WindParams(2.0, 0.0, 0.0)),
                              torch.tensor([2.0, 0.0, 0.0], dtype=DT))

    def test_full_tilt_points_down(self):
        v = wind_vector(WindParams(2.0, math.pi / 2, 0.3))
        assert torch.allclose(v, torch.tensor([0.0, 0.0, -2.0], dtype=DT), atol=1e-12)

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            WindParams(-1.0)


class TestSpawn:
    def test_count_zero(self):
        ps = spawn("rain", 0, unit_box(), seed=1)
        assert len(ps) == 0

    def test_same_seed_bitwise_identical(self):
        a = spawn("snow", 500, unit_box(), seed=42)
        b = spawn("snow", 500, unit_box(), seed=42)
        assert torch.equal(a.positions, b.positions)

    def test_uniform_law(self):
        box = BoundingBox(torch.zeros(3), torch.ones(3))
        ps = spawn("rain", 100_000, box, seed=7)
        means = ps.positions.mean(dim=0)
        assert (means - 0.5).abs().max() < 0.01

    def test_degenerate_volume_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(torch.zeros(3), torch.tensor([1.0, 0.0, 1.0]))

    def test_published_defaults(self):
        rain = spawn("rain", volume=unit_box(), seed=0)
        assert rain.count == 40_000
        assert rain.base_color == (0.7, 0.7, 0.8)
        assert rain.base_scale == (0.0025, 0.0025, 0.075)
        assert rain.base_opacity == 0.13
        snow = spawn("snow", volume=unit_box(), seed=0)
        assert snow.count == 16_000
        assert snow.base_color == (0.9, 0.9, 0.95)
        assert snow.base_scale == (0.0064, 0.004, 0.004)
        assert snow.base_opacity == 0.2


class TestStep:
    def test_rain_closed_form_kinematics(self):
        ps = spawn("rain", 200, unit_box(), seed=3, fall_speed=9.0)
        before = ps.positions.clone()
        dt = 1.0 / 30.0
        step(ps, dt)
        inside = before[:, 2] - 9.0 * dt >= 0.0  # particles that did not hit the floor
        assert torch.equal(ps.positions[inside, 0], before[inside, 0])
        assert torch.equal(ps.positions[inside, 1], before[inside, 1])
        assert torch.allclose(ps.positions[inside, 2], before[inside, 2] - 0.3, atol=1e-12)

    def test_snow_without_noise_falls_straight(self):
        ps = spawn("snow", 100, unit_box(), seed=4, turbulence_sigma=0.0)
        before = ps.positions.clone()
        for _ in range(5):
            step(ps, 0.01)
        assert torch.equal(ps.turbulence, torch.zeros_like(ps.turbulence))
        stayed = before[:, 2] - ps.fall_speed * 0.05 >= 0.0  # never reached the floor
        assert torch.equal(ps.positions[stayed, 0], before[stayed, 0])
        assert torch.equal(ps.positions[stayed, 1], before[stayed, 1])

    def test_seeded_trajectories_bitwise_identical(self):
        runs = []
        for _ in range(2):
            ps = spawn("snow", 300, unit_box(), seed=11, wind=WindParams(1.0, 0.2, 0.5))
            for _ in range(20):
                step(ps, 1.0 / 30.0)
            runs.append(ps.positions.clone())
        assert torch.equal(runs[0], runs[1])

    def test_count_conserved_and_contained(self):
        ps = spawn("rain", 400, unit_box(height=2.0), seed=5)
        for _ in range(50):
            step(ps, 1.0 / 30.0)
        assert len(ps) == 400
        assert bool(ps.volume.contains(ps.positions).all())

    def test_bottom_exit_rerandomizes_horizontals(self):
        box = unit_box(height=1.0)
        ps = spawn("rain", 50, box, seed=6, fall_speed=9.0)
        before = ps.positions.clone()
        step(ps, 0.2)  # 1.8 m drop: everyone exits the bottom
        assert bool(ps.volume.contains(ps.positions).all())
        assert not torch.equal(ps.positions[:, 0], before[:, 0])

    def test_invalid_dt(self):
        with pytest.raises(ValueError):
            step(spawn("rain", 1, unit_box(), seed=0), 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.005, 0.2))
    def test_containment_property(self, seed, dt):
        ps = spawn("snow", 64, unit_box(height=3.0), seed=seed,
                   wind=WindParams(2.0, 0.4, 1.0), turbulence_sigma=1.0)
        for _ in range(10):
            step(ps, dt)
        assert len(ps) == 64
        assert bool(ps.volume.contains(ps.positions).all())


class TestEmit:
    def test_rain_alignment_straight_fall(self):
        ps = spawn("rain", 10, unit_box(), seed=1, fall_speed=5.0)
        prims, colors = emit_gaussians(ps)
        assert len(prims) == 10
        long_axis = quat_rotate(prims.rotations[0], torch.tensor([0.0, 0.0, 1.0], dtype=DT))
        assert torch.allclose(long_axis, torch.tensor([0.0, 0.0, -1.0], dtype=DT), atol=1e-12)

    def test_rain_alignment_with_wind(self):
        ps = spawn("rain", 4, unit_box(), seed=1, fall_speed=9.0, wind=WindParams(3.0, 0.0, 0.0))
        prims, _ = emit_gaussians(ps)
        v = ps.velocity()[0]
        axis = quat_rotate(prims.rotations[0], torch.tensor([0.0, 0.0, 1.0], dtype=DT))
        assert torch.allclose(axis, v / v.norm(), atol=1e-12)

    def test_zero_velocity_keeps_default_orientation(self):
        ps = spawn("rain", 3, unit_box(), seed=1, fall_speed=0.0)
        prims, _ = emit_gaussians(ps)
        assert torch.isfinite(prims.rotations).all()
        assert torch.allclose(prims.rotations[0], torch.tensor([1.0, 0, 0, 0], dtype=DT))

    def test_snow_emits_three_per_particle(self):
        ps = spawn("snow", 7, unit_box(), seed=2)
        prims, colors = emit_gaussians(ps)
        assert len(prims) == 21
        assert colors.shape == (21, 3)

    def test_snow_axes_sixty_degrees_apart(self):
        ps = spawn("snow", 1, unit_box(), seed=2)
        prims, _ = emit_gaussians(ps)
        x = torch.tensor([1.0, 0.0, 0.0], dtype=DT)
        axes = [quat_rotate(prims.rotations[k], x) for k in range(3)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert abs(abs(float((axes[i] * axes[j]).sum())) - 0.5) < 1e-6

    def test_base_values_exact(self):
        ps = spawn("snow", 5, unit_box(), seed=3)
        prims, colors = emit_gaussians(ps)
        assert torch.allclose(prims.log_scales[0].exp(),
                              torch.tensor([0.0064, 0.004, 0.004], dtype=DT), atol=1e-12)
        assert torch.allclose(torch.sigmoid(prims.opacity_logits), torch.full((15,), 0.2, dtype=DT))
        assert torch.equal(colors, torch.tensor([0.9, 0.9, 0.95], dtype=DT).expand(15, 3))


class TestFog:
    def make_output(self, depth, rgb, alpha=1.0):
        h, w = depth.shape
        return RenderOutput(rgb=rgb, depth=depth, alpha=torch.full((h, w), alpha, dtype=DT))

    def test_zero_density_is_identity(self):
        out = self.make_output(torch.rand(4, 4, dtype=DT) * 10, torch.rand(4, 4, 3, dtype=DT))
        res = apply_fog(out, FogParams(density=0.0))
        assert torch.allclose(res.rgb, out.rgb)

    def test_closed_form_case(self):
        out = self.make_output(torch.full((2, 2), 5.0, dtype=DT), torch.ones(2, 2, 3, dtype=DT))
        res = apply_fog(out, FogParams(density=0.2, color=(0.8, 0.8, 0.85)))
        expected = torch.tensor([0.8736, 0.8736, 0.9051], dtype=DT)
        assert (res.rgb - expected).abs().max() < 1e-4

    def test_infinite_depth_limit(self):
        out = self.make_output(torch.full((2, 2), 1e9, dtype=DT), torch.rand(2, 2, 3, dtype=DT))
        res = apply_fog(out, FogParams(density=0.2, color=(0.8, 0.8, 0.85)))
        assert torch.allclose(res.rgb, torch.tensor([0.8, 0.8, 0.85], dtype=DT).expand(2, 2, 3))

    def test_sky_pixels_use_substitute_depth(self):
        out = RenderOutput(rgb=torch.ones(1, 2, 3, dtype=DT),
                           depth=torch.tensor([[2.0, 0.0]], dtype=DT),
                           alpha=torch.tensor([[0.9, 0.0]], dtype=DT))
        res = apply_fog(out, FogParams(density=0.2, color=(0.5, 0.5, 0.5), sky_depth=500.0))
        # the uncovered pixel is fogged as if at 500 m: fully fog-colored
        assert torch.allclose(res.rgb[0, 1], torch.tensor([0.5, 0.5, 0.5], dtype=DT))
        assert float(res.rgb[0, 0, 0]) > 0.5

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 2.0), st.floats(0.0, 30.0), st.floats(0.0, 30.0))
    def test_monotone_toward_fog_color(self, density, d1, d2):
        lo, hi = sorted((d1, d2))
        rgb = torch.tensor([[[0.1, 0.9, 0.4]]], dtype=DT)
        fog = FogParams(density=density, color=(0.6, 0.2, 0.5))
        near = apply_fog(self.make_output(torch.full((1, 1), lo, dtype=DT), rgb.clone()), fog)
        far = apply_fog(self.make_output(torch.full((1, 1), hi, dtype=DT), rgb.clone()), fog)
        fog_c = torch.tensor(fog.color, dtype=DT)
        assert ((far.rgb[0, 0] - fog_c).abs() <= (near.rgb[0, 0] - fog_c).abs() + 1e-12).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 500))
    def test_fog_preserves_unit_range(self, seed):
        gen = torch.Generator().manual_seed(seed)
        out = self.make_output(torch.rand(3, 3, generator=gen, dtype=DT) * 50,
                               torch.rand(3, 3, 3, generator=gen, dtype=DT))
        res = apply_fog(out, FogParams(density=0.3, color=(0.8, 0.8, 0.85)))
        assert float(res.rgb.min()) >= 0.0 and float(res.rgb.max()) <= 1.0

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            FogParams(density=-0.1)
        with pytest.raises(ValueError):
            FogParams(color=(1.2, 0.0, 0.0))


class TestBounds:
    def test_particle_bounds_covers_scene(self):
        gen = torch.Generator().manual_seed(0)
        pts = torch.rand(1000, 3, generator=gen, dtype=DT) * torch.tensor([10.0, 6.0, 3.0])
        box = particle_bounds(pts)
        assert float(box.hi[2]) >= 3.0 + 14.0  # extended upward
        # the box clips the 1%/99% tails, so near-all points sit inside
        assert float(box.contains(pts).to(DT).mean()) > 0.93
