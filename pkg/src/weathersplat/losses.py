"""Image and scene losses for multi-weather training. All torch, differentiable.

The content-consistency term deliberately uses a handcrafted, deterministic
feature extractor (luminance gradient pyramid) instead of a pretrained deep
network: it responds to structure (edges, layout) and ignores global
photometric shifts, which is exactly the contract the loss needs to keep
weather renders structurally aligned with the clear-weather image.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

from .scene import SceneGraph

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

CONTENT_PYRAMID_LEVELS = 3
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

OPACITY_EPS = 1e-6
SCALE_RATIO_LIMIT = 10.0


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _gaussian_kernel1d(size: int, sigma: float, dtype: torch.dtype) -> Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    k = torch.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Mean structural similarity over the valid (un-padded) region.

    11x11 Gaussian window (sigma 1.5), stabilizers C1=0.01^2 and C2=0.03^2
    on unit range, averaged over channels. Inputs are (H, W, 3) or (H, W)
    with H, W >= 11.
    """
    _check_same_shape(a, b)
    if a.ndim == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    h, w = a.shape[0], a.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")

    kernel = _gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA, a.dtype)
    kx = kernel.view(1, 1, 1, SSIM_WINDOW)
    ky = kernel.view(1, 1, SSIM_WINDOW, 1)

    def filt(img: Tensor) -> Tensor:
        x = img.permute(2, 0, 1).unsqueeze(1)  # (C, 1, H, W)
        return F.conv2d(F.conv2d(x, kx), ky)   # valid region only

    mu_a = filt(a)
    mu_b = filt(b)
    sigma_a = filt(a * a) - mu_a * mu_a
    sigma_b = filt(b * b) - mu_b * mu_b
    sigma_ab = filt(a * b) - mu_a * mu_b

    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * sigma_ab + SSIM_C2)) / (
        (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2))
    return ssim_map.mean()


def rgb_loss(render: Tensor, target: Tensor, ssim_weight: float = 0.2) -> Tensor:
    """(1-w)*L1 + w*(1 - SSIM)."""
    _check_same_shape(render, target)
    l1 = (render - target).abs().mean()
    if ssim_weight == 0.0:
        return l1
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(render, target))


def content_features(img: Tensor) -> list[Tensor]:
    """Structure-only feature stack: per pyramid level, horizontal and vertical
    central differences of luminance. Three levels (full, /2, /4), six maps."""
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    r, g, b = img.unbind(-1)
    luma = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b

    feats: list[Tensor] = []
    level = luma.unsqueeze(0).unsqueeze(0)  # (1, 1, H, W)
    for _ in range(CONTENT_PYRAMID_LEVELS):
        lum = level[0, 0]
        feats.append((lum[:, 2:] - lum[:, :-2]) / 2.0)
        feats.append((lum[2:, :] - lum[:-2, :]) / 2.0)
        level = F.avg_pool2d(level, kernel_size=2, stride=2)
    return feats


def content_loss(render: Tensor, raw: Tensor) -> Tensor:
    """Mean absolute distance between the feature stacks of a weather render
    and the matching clear-weather image (equal weight per map)."""
    _check_same_shape(render, raw)
    fa = content_features(render)
    fb = content_features(raw)
    return torch.stack([(x - y).abs().mean() for x, y in zip(fa, fb)]).mean()


def depth_loss(render_depth: Tensor, sparse_depth: Tensor) -> Tensor:
    """Mean |render - sparse| over valid sparse pixels (> 0 and finite)."""
    _check_same_shape(render_depth, sparse_depth)
    valid = torch.isfinite(sparse_depth) & (sparse_depth > 0)
    if not bool(valid.any()):
        return torch.zeros((), dtype=render_depth.dtype)
    return (render_depth[valid] - sparse_depth[valid]).abs().mean()


def opacity_loss(alpha: Tensor, sky_mask: Tensor) -> Tensor:
    """Entropy of the coverage map plus a penalty for coverage over sky pixels,
    normalized by pixel count. Pushes opacities to commit to 0 or 1 and to 0
    on masked sky."""
    _check_same_shape(alpha, sky_mask.to(alpha.dtype))
    o = alpha.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
    entropy = -(o * torch.log(o)).sum()
    sky = -(sky_mask.to(alpha.dtype) * torch.log(1.0 - o)).sum()
    return (entropy + sky) / alpha.numel()


def regularization_loss(graph: SceneGraph) -> Tensor:
    """Scale-anisotropy penalty plus temporal smoothness of non-rigid offsets.

    Anisotropy: sum over Gaussians of max(exp(max-min log scale) - 10, 0).
    Temporal: sum of squared differences of consecutive-frame offsets.
    """
    terms = []
    for node in graph.gaussian_nodes():
        if len(node.gaussians) == 0:
            continue
        ls = node.gaussians.log_scales
        ratio = torch.exp(ls.max(dim=-1).values - ls.min(dim=-1).values)
        terms.append((ratio - SCALE_RATIO_LIMIT).clamp_min(0.0).sum())
        if node.offsets is not None and node.offsets.shape[0] > 1:
            diff = node.offsets[1:] - node.offsets[:-1]
            terms.append((diff * diff).sum())
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio on unit range; inf for identical inputs."""
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
