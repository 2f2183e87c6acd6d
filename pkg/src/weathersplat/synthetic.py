"""Synthetic scene + supervision generator.

Builds a random desk-scale scene (static background cloud plus one rigid
node on a linear trajectory), renders clear-weather ground truth with the
real pipeline, and derives edited-weather targets by exact per-channel
affine color transforms of the raw renders. Ground truth is therefore known
by construction: geometry is shared across weathers and each weather's
appearance is an analytic function of the raw appearance.

All scene parameters are rounded through float32 so the generating scene
survives a WCTY archive round trip bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from . import io as sio
from .rasterizer import Camera
from .scene import (DTYPE, FEATURE_DIM, GaussianNode, GaussianPrimitives,
                    SceneGraph, SkyNode, WeatherDecoder)
from .training import SupervisionFrame, render_frame
from .transforms import quat_normalize

# per-channel affine edits (gain, bias) defining each synthetic weather
WEATHER_AFFINES: dict[str, tuple[float, float]] = {
    "rainy": (0.70, 0.05),   # dim, cool
    "snowy": (0.45, 0.50),   # washed out, bright
    "foggy": (0.55, 0.30),
}

DEFAULT_WIDTH = 64
DEFAULT_HEIGHT = 64
SPARSE_DEPTH_FRACTION = 0.25


@dataclass
class SyntheticDataset:
    root: Path
    scene_path: Path       # the generating scene (ground truth)
    init_path: Path        # perturbed copy used as the training start
    manifest_path: Path
    weathers: list[str]
    affines: dict[str, tuple[float, float]] = field(default_factory=dict)


def _f32(t: torch.Tensor) -> torch.Tensor:
    """Round through float32 so values are archive-exact."""
    return t.to(torch.float32).to(DTYPE)


def arc_cameras(frames: int, width: int, height: int, focal: float = 300.0) -> list[Camera]:
    """Cameras on a short lateral arc, all aimed at the scene center."""
    eyes_y = torch.linspace(-1.5, 1.5, frames, dtype=DTYPE)
    return [
        Camera.look_at(eye=(0.0, float(y), 2.0), target=(35.0, 0.0, 2.0),
                       fx=focal, fy=focal, width=width, height=height)
        for y in eyes_y
    ]


def build_scene(n_gaussians: int = 500, frames: int = 10,
                weathers: tuple[str, ...] = ("rainy", "snowy"), seed: int = 0,
                width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> tuple[SceneGraph, list[Camera]]:
    """Random generating scene: background cloud in the central camera's
    frustum (upper rows left open for sky) and a rigid blob crossing the view."""
    gen = torch.Generator().manual_seed(seed)
    cameras = arc_cameras(frames, width, height)
    center = cameras[len(cameras) // 2]

    n_rigid = min(50, n_gaussians // 4)
    n_background = n_gaussians - n_rigid

    u = 2.0 + torch.rand(n_background, generator=gen, dtype=DTYPE) * (width - 5)
    v = height * 0.30 + torch.rand(n_background, generator=gen, dtype=DTYPE) * (height * 0.70 - 3)
    d = 20.0 + torch.rand(n_background, generator=gen, dtype=DTYPE) ** 1.5 * 40.0
    cam_pts = torch.stack([(u - center.cx) / center.fx * d, (v - center.cy) / center.fy * d, d], dim=-1)
    positions = (cam_pts - center.translation) @ center.rotation

    background = GaussianNode.background(GaussianPrimitives(
        positions=_f32(positions),
        log_scales=_f32(torch.log(0.08 + torch.rand(n_background, 3, generator=gen, dtype=DTYPE) * 0.10
                                  * (d / 30.0).unsqueeze(-1))),
        rotations=_f32(quat_normalize(torch.randn(n_background, 4, generator=gen, dtype=DTYPE))),
        opacity_logits=_f32(1.5 + torch.rand(n_background, generator=gen, dtype=DTYPE) * 2.0),
        features=_f32((torch.rand(n_background, FEATURE_DIM, generator=gen, dtype=DTYPE) - 0.5) * 1.6),
    ))

    rigid = GaussianNode.rigid("mover", GaussianPrimitives(
        positions=_f32(torch.randn(n_rigid, 3, generator=gen, dtype=DTYPE) * torch.tensor([0.8, 0.8, 0.4], dtype=DTYPE)),
        log_scales=_f32(torch.log(0.10 + torch.rand(n_rigid, 3, generator=gen, dtype=DTYPE) * 0.08)),
        rotations=_f32(quat_normalize(torch.randn(n_rigid, 4, generator=gen, dtype=DTYPE))),
        opacity_logits=_f32(2.0 + torch.rand(n_rigid, generator=gen, dtype=DTYPE) * 1.5),
        features=_f32((torch.rand(n_rigid, FEATURE_DIM, generator=gen, dtype=DTYPE) - 0.5) * 1.6),
    ), frames)
    with torch.no_grad():
        ts = torch.linspace(0, 1, frames, dtype=DTYPE)
        rigid.pose_translations.copy_(_f32(torch.stack([
            torch.full((frames,), 26.0, dtype=DTYPE),
            -2.5 + 5.0 * ts,
            torch.full((frames,), 1.5, dtype=DTYPE),
        ], dim=-1)))

    all_weathers = ("raw",) + tuple(weathers)
    sky_h, sky_w = 64, 128
    elevation = torch.linspace(1.0, 0.0, sky_h, dtype=DTYPE).unsqueeze(1)
    azimuth = torch.linspace(0.0, 2 * math.pi, sky_w, dtype=DTYPE).unsqueeze(0)
    base_sky = torch.stack([
        0.35 + 0.35 * elevation + 0.05 * torch.sin(3 * azimuth).expand(sky_h, sky_w),
        0.40 + 0.30 * elevation + 0.05 * torch.cos(2 * azimuth).expand(sky_h, sky_w),
        0.55 + 0.25 * elevation.expand(sky_h, sky_w),
    ], dim=-1).clamp(0.02, 0.98)
    sky = SkyNode({w: _f32(base_sky.clone()) for w in all_weathers})

    decoders = {w: _f32_decoder(WeatherDecoder.xavier(w, seed=seed + 11 * i))
                for i, w in enumerate(all_weathers)}
    graph = SceneGraph(background, frames, sky=sky, rigid_nodes=[rigid], decoders=decoders)
    return graph, cameras


def _f32_decoder(dec: WeatherDecoder) -> WeatherDecoder:
    return WeatherDecoder(dec.weather, _f32(dec.w1), _f32(dec.b1), _f32(dec.w2), _f32(dec.b2))


def perturb_scene(graph: SceneGraph, seed: int = 1, *, position_noise: float = 0.02,
                  log_scale_noise: float = 0.08, rotation_noise: float = 0.02,
                  opacity_noise: float = 0.15, feature_noise: float = 0.08,
                  decoder_noise: float = 0.03, sky_noise: float = 0.05) -> None:
    """Add seeded Gaussian noise to every trainable array (in place)."""
    gen = torch.Generator().manual_seed(seed)

    def noise(t: torch.Tensor, scale: float) -> torch.Tensor:
        return _f32(t + torch.randn(*t.shape, generator=gen, dtype=DTYPE) * scale)

    with torch.no_grad():
        for node in graph.gaussian_nodes():
            g = node.gaussians
            g.positions = noise(g.positions, position_noise)
            g.log_scales = noise(g.log_scales, log_scale_noise)
            g.rotations = _f32(quat_normalize(noise(g.rotations, rotation_noise)))
            g.opacity_logits = noise(g.opacity_logits, opacity_noise)
            g.features = noise(g.features, feature_noise)
        for dec in graph.decoders.values():
            dec.w1 = noise(dec.w1, decoder_noise)
            dec.b1 = noise(dec.b1, decoder_noise)
            dec.w2 = noise(dec.w2, decoder_noise)
            dec.b2 = noise(dec.b2, decoder_noise)
        for w in graph.sky.textures:
            graph.sky.textures[w] = noise(graph.sky.textures[w], sky_noise).clamp(0.0, 1.0)


def quantize8(image: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid used by the image files."""
    return (image.clamp(0, 1) * 255.0).round() / 255.0


def make_synthetic(out_dir: str | Path, n_gaussians: int = 500, frames: int = 10,
                   weathers: tuple[str, ...] = ("rainy", "snowy"), seed: int = 0,
                   width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> SyntheticDataset:
    """Generate scene archives, supervision images/depth/masks, and a manifest.

    Weather targets are exact per-channel affine transforms of the (8-bit
    quantized) raw renders; depth rasters keep a seeded sparse subset of
    covered pixels; sky masks mark pixels with near-zero coverage.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    graph, cameras = build_scene(n_gaussians, frames, weathers, seed, width, height)

    affines = {w: WEATHER_AFFINES.get(w, (0.8, 0.1)) for w in weathers}
    gen = torch.Generator().manual_seed(seed + 999)

    manifest_frames = []
    with torch.no_grad():
        for t, camera in enumerate(cameras):
            rendered = render_frame(graph, t, "raw", camera)
            raw_img = quantize8(rendered.rgb)
            entry_images = {"raw": f"images/raw_{t:03d}.png"}
            sio.save_image(out / entry_images["raw"], raw_img)
            for w in weathers:
                gain, bias = affines[w]
                target = quantize8(gain * raw_img + bias)
                entry_images[w] = f"images/{w}_{t:03d}.png"
                sio.save_image(out / entry_images[w], target)

            covered = rendered.alpha > 0.5
            keep = (torch.rand(height, width, generator=gen, dtype=DTYPE) < SPARSE_DEPTH_FRACTION) & covered
            sparse = torch.where(keep, rendered.depth, torch.zeros_like(rendered.depth))
            depth_rel = f"images/depth_{t:03d}.f32"
            sio.save_depth(out / depth_rel, sparse)

            mask_rel = f"images/sky_{t:03d}.png"
            sio.save_mask(out / mask_rel, rendered.alpha < 0.01)

            manifest_frames.append({
                "frame": t,
                "camera": sio.camera_to_dict(camera),
                "images": entry_images,
                "depth": depth_rel,
                "sky_mask": mask_rel,
            })

    manifest_path = out / "manifest.yaml"
    manifest_path.write_text(yaml.safe_dump({"frames": manifest_frames}, sort_keys=False))

    scene_path = out / "scene.wcty"
    sio.save_scene(graph, scene_path)

    perturb_scene(graph, seed=seed + 1)
    init_path = out / "init.wcty"
    sio.save_scene(graph, init_path)

    return SyntheticDataset(out, scene_path, init_path, manifest_path,
                            weathers=["raw", *weathers], affines=affines)
