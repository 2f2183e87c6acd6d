"""Analytic-gradient checks against central finite differences.

These are the working-size versions; the full 100-scene sweep required for
acceptance lives in test_acceptance.py and reuses the same harness.
"""
import pytest
import torch

from conftest import DT, identity_camera, random_primitives, small_graph
from oracles import central_difference, finite_difference_check
from weathersplat.rasterizer import composite_sky, project, rasterize, rasterize_backward
from weathersplat.scene import GaussianNode, SceneGraph, covariance3d
from weathersplat.training import (SupervisionFrame, TrainingConfig,
                                   collect_parameters, render_frame, total_loss)


def gradient_scene(seed, n=5, size=16, rigid=0, nonrigid=0):
    """Scene + supervision built to stay off the blend's piecewise boundaries:
    depths well separated (no sort flips), opacities below the 0.99 clip."""
    graph = small_graph(seed=seed, n_background=n, rigid=rigid, nonrigid=nonrigid, frame_count=2)
    for node in graph.gaussian_nodes():
        g = node.gaussians
        with torch.no_grad():
            g.opacity_logits.clamp_(-1.5, 1.2)
    cam = identity_camera(width=size, height=size)
    gen = torch.Generator().manual_seed(seed + 500)
    frame = SupervisionFrame(
        0, "rainy",
        torch.rand(size, size, 3, generator=gen, dtype=DT), cam,
        depth=torch.rand(size, size, generator=gen, dtype=DT) * 4 + 3,
        sky_mask=torch.rand(size, size, generator=gen) > 0.7,
    )
    raw_image = torch.rand(size, size, 3, generator=gen, dtype=DT)
    return graph, cam, frame, raw_image


def loss_fn(graph, frame, raw_image, cfg):
    out = render_frame(graph, frame.frame, frame.weather, frame.camera, strategy="matrix")
    return total_loss(out, frame, raw_image, graph, cfg)[0]


class TestRenderGradients:
    def test_single_gaussian_all_parameters(self):
        """8x8 single-Gaussian scene: every parameter matches FD (step 1e-4)."""
        graph = small_graph(seed=21, n_background=1, frame_count=1)
        cfg = TrainingConfig(iterations=0)
        entries = collect_parameters(graph, cfg)
        cam = identity_camera(width=8, height=8, focal=12.0)
        gen = torch.Generator().manual_seed(77)
        g_rgb = torch.randn(8, 8, 3, generator=gen, dtype=DT)
        g_depth = torch.randn(8, 8, generator=gen, dtype=DT)
        g_alpha = torch.randn(8, 8, generator=gen, dtype=DT)

        def scalar():
            out = render_frame(graph, 0, "rainy", cam, strategy="matrix")
            return (out.rgb * g_rgb).sum() + (out.depth * g_depth).sum() + (out.alpha * g_alpha).sum()

        loss = scalar()
        loss.backward()
        failures, checked, skipped = finite_difference_check(
            lambda: scalar().detach(), entries, samples_per_group=6, seed=21)
        assert not failures, failures
        assert checked > 30

    def test_opacity_gradient_sign_for_rewarded_color(self):
        # a loss that rewards red must push the red splat's opacity upward
        cam = identity_camera(width=8, height=8, focal=12.0)
        from weathersplat.scene import Renderables
        opacity_logit = torch.tensor([0.2], dtype=DT, requires_grad=True)
        rend = Renderables(
            positions=torch.tensor([[0.0, 0.0, 5.0]], dtype=DT),
            covariances=0.25 * torch.eye(3, dtype=DT).unsqueeze(0),
            opacities=torch.sigmoid(opacity_logit),
            colors=torch.tensor([[1.0, 0.0, 0.0]], dtype=DT),
        )
        out = rasterize(project(rend, cam), cam)
        loss = 1.0 - out.rgb[..., 0].mean()
        loss.backward()
        analytic = float(opacity_logit.grad)
        assert analytic < 0

        def scalar():
            r = Renderables(
                positions=torch.tensor([[0.0, 0.0, 5.0]], dtype=DT),
                covariances=0.25 * torch.eye(3, dtype=DT).unsqueeze(0),
                opacities=torch.sigmoid(opacity_logit),
                colors=torch.tensor([[1.0, 0.0, 0.0]], dtype=DT),
            )
            o = rasterize(project(r, cam), cam)
            return 1.0 - o.rgb[..., 0].mean()

        fd = central_difference(scalar, opacity_logit, 0, 1e-4)
        assert fd < 0
        assert abs(analytic - fd) < 1e-3 * abs(fd)

    def test_zero_upstream_gradient_gives_zero_parameter_gradients(self):
        graph = small_graph(seed=22, n_background=3, frame_count=1)
        cfg = TrainingConfig(iterations=0)
        entries = collect_parameters(graph, cfg)
        cam = identity_camera()
        out = render_frame(graph, 0, "raw", cam, strategy="matrix")
        screen = rasterize_backward(out, grad_rgb=torch.zeros_like(out.rgb),
                                    grad_depth=torch.zeros_like(out.depth),
                                    grad_alpha=torch.zeros_like(out.alpha))
        for e in entries:
            g = e.get().grad
            assert g is None or float(g.abs().max()) == 0.0
        assert screen is not None and float(screen.abs().max()) == 0.0

    def test_backward_without_graph_raises(self):
        graph = small_graph(seed=23, n_background=2, frame_count=1)
        cam = identity_camera()
        with torch.no_grad():
            out = render_frame(graph, 0, "raw", cam)
        with pytest.raises(RuntimeError):
            rasterize_backward(out, grad_rgb=torch.ones_like(out.rgb))

    def test_tile_strategy_gradients_match_matrix(self):
        graph = small_graph(seed=24, n_background=6, frame_count=1)
        cfg = TrainingConfig(iterations=0)
        cam = identity_camera(width=24, height=24)
        grads = {}
        for strategy in ("matrix", "tile", "pairs"):
            entries = collect_parameters(graph, cfg)
            for e in entries:
                e.get().grad = None
            out = render_frame(graph, 0, "rainy", cam, tile_size=8, strategy=strategy)
            (out.rgb.sum() + 2.0 * out.depth.sum() + 0.5 * out.alpha.sum()).backward()
            grads[strategy] = {e.name: (e.get().grad.clone() if e.get().grad is not None else None)
                               for e in entries}
        for strategy in ("tile", "pairs"):
            for name, g in grads["matrix"].items():
                other = grads[strategy][name]
                if g is None:
                    assert other is None or float(other.abs().max()) == 0.0
                else:
                    assert torch.allclose(g, other, atol=1e-9), (strategy, name)


class TestTotalLossGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_components_active(self, seed):
        graph, cam, frame, raw_image = gradient_scene(seed, n=5, rigid=2, nonrigid=2)
        cfg = TrainingConfig(iterations=0)
        entries = collect_parameters(graph, cfg)
        loss = loss_fn(graph, frame, raw_image, cfg)
        assert all(k in total_loss(render_frame(graph, 0, "rainy", cam, strategy="matrix"),
                                   frame, raw_image, graph, cfg)[1]
                   for k in ("rgb", "cc", "depth", "opacity", "reg"))
        loss.backward()
        failures, checked, skipped = finite_difference_check(
            lambda: loss_fn(graph, frame, raw_image, cfg).detach(),
            entries, samples_per_group=5, seed=seed)
        assert not failures, failures
        assert checked >= 40
        assert skipped <= checked * 0.25

    def test_gradient_of_total_is_weighted_sum_of_components(self):
        graph, cam, frame, raw_image = gradient_scene(31, n=4)
        cfg = TrainingConfig(iterations=0)
        entries = collect_parameters(graph, cfg)
        pos = graph.background.gaussians.positions

        def component_grads(which):
            for e in entries:
                e.get().grad = None
            out = render_frame(graph, frame.frame, frame.weather, frame.camera, strategy="matrix")
            from weathersplat.losses import (content_loss, depth_loss,
                                             opacity_loss, rgb_loss)
            terms = {
                "rgb": rgb_loss(out.rgb, frame.image, cfg.ssim_weight),
                "cc": content_loss(out.rgb, raw_image),
                "depth": depth_loss(out.depth, frame.depth),
                "opacity": opacity_loss(out.alpha, frame.sky_mask),
            }
            terms[which].backward()
            return pos.grad.clone() if pos.grad is not None else torch.zeros_like(pos)

        parts = {k: component_grads(k) for k in ("rgb", "cc", "depth", "opacity")}
        combined = (parts["rgb"] + cfg.cc_weight * parts["cc"]
                    + cfg.depth_weight * parts["depth"] + cfg.opacity_weight * parts["opacity"])

        for e in entries:
            e.get().grad = None
        loss_fn(graph, frame, raw_image, cfg).backward()
        assert torch.allclose(pos.grad, combined, atol=1e-10)
