import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import DT, identity_camera, random_primitives, small_graph
from oracles import reference_rasterize
from weathersplat.rasterizer import (Camera, RenderOutput, composite_sky,
                                     project, rasterize, sample_equirect)
from weathersplat.scene import Renderables, covariance3d


def renderables_from(prims, colors=None):
    n = len(prims)
    return Renderables(
        positions=prims.positions,
        covariances=covariance3d(prims.log_scales, prims.rotations),
        opacities=prims.opacities(),
        colors=colors if colors is not None else torch.rand(n, 3, dtype=DT),
    )


def isotropic_renderable(position, sigma, opacity, color):
    return Renderables(
        positions=torch.tensor([position], dtype=DT),
        covariances=(sigma ** 2) * torch.eye(3, dtype=DT).unsqueeze(0),
        opacities=torch.tensor([opacity], dtype=DT),
        colors=torch.tensor([color], dtype=DT),
    )


class TestProject:
    def test_on_axis_point(self):
        cam = Camera(fx=100, fy=100, cx=32, cy=32, rotation=torch.eye(3, dtype=DT),
                     translation=torch.zeros(3, dtype=DT), width=65, height=65)
        rend = isotropic_renderable([0.0, 0.0, 5.0], 1.0, 0.8, [1.0, 0, 0])
        sp = project(rend, cam)
        assert len(sp) == 1
        assert torch.allclose(sp.means2d[0], torch.tensor([32.0, 32.0], dtype=DT))
        # J = diag(fx/z, fy/z) for the on-axis point: (100/5)^2 = 400 plus low-pass
        assert torch.allclose(sp.cov2d[0], torch.diag(torch.tensor([400.3, 400.3], dtype=DT)), atol=1e-9)
        assert float(sp.depths[0]) == 5.0

    def test_behind_camera_culled(self):
        cam = identity_camera()
        rend = isotropic_renderable([0.0, 0.0, -1.0], 0.2, 0.8, [1.0, 0, 0])
        assert len(project(rend, cam)) == 0

    def test_beyond_far_plane_culled(self):
        cam = identity_camera()
        rend = isotropic_renderable([0.0, 0.0, 2000.0], 0.2, 0.8, [1.0, 0, 0])
        assert len(project(rend, cam)) == 0

    def test_rigid_invariance(self):
        shift = torch.tensor([3.0, -2.0, 1.5], dtype=DT)
        cam_a = identity_camera()
        cam_b = Camera(fx=cam_a.fx, fy=cam_a.fy, cx=cam_a.cx, cy=cam_a.cy,
                       rotation=torch.eye(3, dtype=DT), translation=-shift,
                       width=cam_a.width, height=cam_a.height)
        prims = random_primitives(5, seed=3)
        rend_a = renderables_from(prims, colors=torch.rand(5, 3, dtype=DT))
        rend_b = replace(rend_a, positions=rend_a.positions + shift)
        sp_a = project(rend_a, cam_a)
        sp_b = project(rend_b, cam_b)
        assert torch.allclose(sp_a.means2d, sp_b.means2d, atol=1e-10)
        assert torch.allclose(sp_a.cov2d, sp_b.cov2d, atol=1e-10)
        assert torch.allclose(sp_a.depths, sp_b.depths, atol=1e-12)

    def test_far_off_screen_culled(self):
        cam = identity_camera()
        rend = isotropic_renderable([500.0, 0.0, 5.0], 0.2, 0.8, [1.0, 0, 0])
        assert len(project(rend, cam)) == 0


class TestRasterize:
    def test_empty_set(self):
        out = rasterize(project(renderables_from(random_primitives(0, 0)), identity_camera()),
                        identity_camera())
        assert torch.equal(out.rgb, torch.zeros(16, 16, 3, dtype=DT))
        assert torch.equal(out.depth, torch.zeros(16, 16, dtype=DT))
        assert torch.equal(out.alpha, torch.zeros(16, 16, dtype=DT))

    def test_single_opaque_splat(self):
        # opacity 1 clips to 0.99; pixel dead-center gets exp(0) = 1
        cam = Camera(fx=100, fy=100, cx=8, cy=8, rotation=torch.eye(3, dtype=DT),
                     translation=torch.zeros(3, dtype=DT), width=17, height=17)
        rend = isotropic_renderable([0.0, 0.0, 5.0], 0.5, 1.0, [1.0, 0.0, 0.0])
        out = rasterize(project(rend, cam), cam)
        assert abs(float(out.rgb[8, 8, 0]) - 0.99) < 1e-12
        assert float(out.rgb[8, 8, 1]) == 0.0
        assert abs(float(out.depth[8, 8]) - 0.99 * 5.0) < 1e-12
        assert abs(float(out.alpha[8, 8]) - 0.99) < 1e-12

    def test_two_overlapping_splats_match_reference(self):
        cam = identity_camera(width=24, height=24)
        rend = Renderables(
            positions=torch.tensor([[0.1, 0.0, 5.0], [-0.1, 0.05, 6.0]], dtype=DT),
            covariances=torch.stack([0.25 * torch.eye(3, dtype=DT), 0.16 * torch.eye(3, dtype=DT)]),
            opacities=torch.tensor([0.7, 0.9], dtype=DT),
            colors=torch.tensor([[1.0, 0.2, 0.1], [0.1, 0.4, 1.0]], dtype=DT),
        )
        sp = project(rend, cam)
        out = rasterize(sp, cam, strategy="matrix")
        ref_rgb, ref_depth, ref_alpha = reference_rasterize(
            sp.means2d, sp.cov2d, sp.depths, sp.opacities, sp.colors, 24, 24)
        assert np.abs(out.rgb.numpy() - ref_rgb).max() < 1e-5
        assert np.abs(out.depth.numpy() - ref_depth).max() < 1e-5
        assert np.abs(out.alpha.numpy() - ref_alpha).max() < 1e-5

    @pytest.mark.parametrize("strategy", ["matrix", "tile", "pairs"])
    def test_random_scenes_match_reference(self, strategy):
        for seed in range(4):
            cam = identity_camera(width=32, height=32, focal=40.0)
            prims = random_primitives(40, seed=seed, opacity_logit_range=(-1.0, 3.0))
            rend = renderables_from(prims, torch.rand(40, 3, dtype=DT))
            sp = project(rend, cam)
            out = rasterize(sp, cam, tile_size=16, strategy=strategy)
            ref_rgb, ref_depth, ref_alpha = reference_rasterize(
                sp.means2d, sp.cov2d, sp.depths, sp.opacities, sp.colors, 32, 32)
            assert np.abs(out.rgb.numpy() - ref_rgb).max() < 1e-5
            assert np.abs(out.depth.numpy() - ref_depth).max() < 1e-5
            assert np.abs(out.alpha.numpy() - ref_alpha).max() < 1e-5

    def test_tile_sizes_agree(self):
        cam = identity_camera(width=30, height=22, focal=40.0)  # non-divisible edges
        rend = renderables_from(random_primitives(60, seed=9), torch.rand(60, 3, dtype=DT))
        sp = project(rend, cam)
        base = rasterize(sp, cam, strategy="matrix")
        for ts in (8, 16, 64):
            tiled = rasterize(sp, cam, tile_size=ts, strategy="tile")
            assert torch.allclose(base.rgb, tiled.rgb, atol=1e-9)
            assert torch.allclose(base.depth, tiled.depth, atol=1e-9)
            assert torch.allclose(base.alpha, tiled.alpha, atol=1e-9)

    def test_deterministic_repeat(self):
        cam = identity_camera(width=20, height=20)
        rend = renderables_from(random_primitives(25, seed=4), torch.rand(25, 3, dtype=DT))
        sp = project(rend, cam)
        a = rasterize(sp, cam, strategy="tile")
        b = rasterize(sp, cam, strategy="tile")
        assert torch.equal(a.rgb, b.rgb) and torch.equal(a.depth, b.depth) and torch.equal(a.alpha, b.alpha)

    def test_depth_ties_broken_by_index(self):
        cam = identity_camera()
        rend = Renderables(
            positions=torch.tensor([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]], dtype=DT),
            covariances=torch.stack([0.09 * torch.eye(3, dtype=DT)] * 2),
            opacities=torch.tensor([0.9, 0.9], dtype=DT),
            colors=torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=DT),
        )
        out = rasterize(project(rend, cam), cam)
        center = out.rgb[7:9, 7:9]
        assert (center[..., 0] > center[..., 1]).all()  # index 0 wins the tie, blends first

    def test_alpha_bounds_and_finiteness(self):
        cam = identity_camera(width=24, height=24)
        rend = renderables_from(random_primitives(80, seed=5, opacity_logit_range=(2.0, 6.0)),
                                torch.rand(80, 3, dtype=DT))
        out = rasterize(project(rend, cam), cam)
        assert float(out.alpha.min()) >= 0.0 and float(out.alpha.max()) <= 1.0
        assert torch.isfinite(out.rgb).all() and (out.depth >= 0).all()


class TestCompositeSky:
    def make_output(self, alpha_value, rgb_value):
        rgb = torch.zeros(4, 4, 3, dtype=DT) + torch.tensor(rgb_value, dtype=DT)
        alpha = torch.full((4, 4), alpha_value, dtype=DT)
        return RenderOutput(rgb=rgb, depth=torch.zeros(4, 4, dtype=DT), alpha=alpha)

    def camera(self):
        return identity_camera(width=4, height=4, focal=4.0)

    def test_fully_occluded_unchanged(self):
        out = self.make_output(1.0, [0.3, 0.3, 0.3])
        sky = torch.full((8, 16, 3), 0.6, dtype=DT)
        res = composite_sky(out, self.camera(), sky)
        assert torch.allclose(res.rgb, out.rgb)

    def test_pure_sky_pixel(self):
        out = self.make_output(0.0, [0.0, 0.0, 0.0])
        sky = torch.full((8, 16, 3), 0.6, dtype=DT)
        res = composite_sky(out, self.camera(), sky)
        assert torch.allclose(res.rgb, torch.full((4, 4, 3), 0.6, dtype=DT))

    def test_linear_blend(self):
        out = self.make_output(0.5, [0.2, 0.0, 0.0])
        sky = torch.full((8, 16, 3), 0.4, dtype=DT)
        res = composite_sky(out, self.camera(), sky)
        expected = torch.tensor([0.4, 0.2, 0.2], dtype=DT).expand(4, 4, 3)
        assert torch.allclose(res.rgb, expected)

    def test_equirect_sampling_interpolates(self):
        texture = torch.zeros(4, 8, 3, dtype=DT)
        texture[:, :, 0] = torch.linspace(0, 1, 8, dtype=DT)
        d = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=DT)
        vals = sample_equirect(texture, d)
        assert vals.shape == (2, 3)
        assert (vals[:, 0] >= 0).all() and (vals[:, 0] <= 1).all()
        # +x (azimuth 0) samples mid-texture, +y (azimuth pi/2) samples 3/4 across
        assert vals[1, 0] > vals[0, 0]


class TestCameraValidation:
    def test_invalid_focal(self):
        with pytest.raises(ValueError):
            Camera(fx=0, fy=10, cx=1, cy=1, rotation=torch.eye(3, dtype=DT),
                   translation=torch.zeros(3, dtype=DT), width=4, height=4)

    def test_invalid_planes(self):
        with pytest.raises(ValueError):
            Camera(fx=10, fy=10, cx=1, cy=1, rotation=torch.eye(3, dtype=DT),
                   translation=torch.zeros(3, dtype=DT), width=4, height=4, near=5.0, far=2.0)

    def test_look_at_points_camera_at_target(self):
        cam = Camera.look_at(eye=(0.0, -5.0, 1.0), target=(0.0, 0.0, 1.0),
                             fx=30, fy=30, width=16, height=16)
        target_cam = cam.rotation @ torch.tensor([0.0, 0.0, 1.0], dtype=DT) + cam.translation
        assert abs(float(target_cam[0])) < 1e-12 and abs(float(target_cam[1])) < 1e-12
        assert float(target_cam[2]) == pytest.approx(5.0)
