import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from weathersplat.rasterizer import Camera
from weathersplat.scene import (GaussianNode, GaussianPrimitives, SceneGraph,
                                SkyNode, WeatherDecoder)
from weathersplat.transforms import quat_normalize

DT = torch.float64


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_primitives(n: int, seed: int, *, depth_range=(4.0, 8.0), lateral=1.6,
                      scale_range=(0.1, 0.35), opacity_logit_range=(-1.0, 1.0),
                      min_depth_gap: float = 0.0) -> GaussianPrimitives:
    """Well-conditioned random primitives in front of a z-forward camera.

    min_depth_gap > 0 spaces depths apart so that tiny test perturbations can
    never reorder the depth sort (needed for finite-difference checks).
    """
    gen = torch.Generator().manual_seed(seed)
    pos = torch.empty(n, 3, dtype=DT)
    pos[:, 0] = (torch.rand(n, generator=gen, dtype=DT) * 2 - 1) * lateral
    pos[:, 1] = (torch.rand(n, generator=gen, dtype=DT) * 2 - 1) * lateral
    if min_depth_gap > 0 and n > 1:
        span = depth_range[1] - depth_range[0]
        base = torch.linspace(depth_range[0], depth_range[1], n, dtype=DT)
        jitter = (torch.rand(n, generator=gen, dtype=DT) - 0.5) * max(span / n - min_depth_gap, 0.0)
        pos[:, 2] = base + jitter
    else:
        pos[:, 2] = depth_range[0] + torch.rand(n, generator=gen, dtype=DT) * (depth_range[1] - depth_range[0])
    lo, hi = scale_range
    log_scales = torch.log(lo + torch.rand(n, 3, generator=gen, dtype=DT) * (hi - lo))
    rotations = quat_normalize(torch.randn(n, 4, generator=gen, dtype=DT))
    llo, lhi = opacity_logit_range
    opacity_logits = llo + torch.rand(n, generator=gen, dtype=DT) * (lhi - llo)
    features = (torch.rand(n, 32, generator=gen, dtype=DT) - 0.5) * 0.4
    return GaussianPrimitives(pos, log_scales, rotations, opacity_logits, features)


def identity_camera(width=16, height=16, focal=24.0) -> Camera:
    return Camera(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  rotation=torch.eye(3, dtype=DT), translation=torch.zeros(3, dtype=DT),
                  width=width, height=height)


def small_graph(seed: int = 0, n_background: int = 6, frame_count: int = 3,
                weathers=("raw", "rainy"), rigid: int = 0, nonrigid: int = 0,
                sky_size=(8, 16)) -> SceneGraph:
    background = GaussianNode.background(random_primitives(n_background, seed))
    rigid_nodes = []
    if rigid:
        rigid_nodes.append(GaussianNode.rigid("rigid-0", random_primitives(rigid, seed + 1), frame_count))
    nonrigid_nodes = []
    if nonrigid:
        nonrigid_nodes.append(GaussianNode.nonrigid("nonrigid-0", random_primitives(nonrigid, seed + 2), frame_count))
    gen = torch.Generator().manual_seed(seed + 7)
    sky = SkyNode({w: torch.rand(*sky_size, 3, generator=gen, dtype=DT) * 0.4 + 0.3 for w in weathers})
    decoders = {w: WeatherDecoder.xavier(w, seed=seed + i) for i, w in enumerate(weathers)}
    return SceneGraph(background, frame_count, sky=sky, rigid_nodes=rigid_nodes,
                      nonrigid_nodes=nonrigid_nodes, decoders=decoders)
