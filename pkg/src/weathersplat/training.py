"""Multi-weather consistency training.

One optimizer owns every scene parameter (Gaussian arrays, decoder weights,
per-weather sky textures, non-rigid offsets). Each step samples a
(frame, weather) supervision pair, renders it, backpropagates the weighted
loss stack, applies Adam with per-group learning rates, and periodically
densifies/prunes Gaussians driven by accumulated screen-space positional
gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .losses import (content_loss, depth_loss, opacity_loss, psnr,
                     regularization_loss, rgb_loss)
from .rasterizer import Camera, RenderOutput, composite_sky, project, rasterize
from .scene import NONRIGID_KIND, RAW_WEATHER, GaussianNode, SceneGraph
from .transforms import quat_normalize, quat_to_rotmat


@dataclass
class TrainingConfig:
    iterations: int = 30_000
    ssim_weight: float = 0.2          # SSIM share inside the RGB loss
    cc_weight: float = 1.0            # content consistency
    depth_weight: float = 0.01
    opacity_weight: float = 0.05
    lr_base: float = 1e-4             # features, decoders, sky, and all scalars
    lr_rotation_nonrigid: float = 5e-5
    lr_rotation_other: float = 1e-5
    densify_grad_threshold: float = 3e-4
    prune_scale_threshold: float = 3e-3   # fraction of scene extent
    densify_interval: int = 500
    densify_stop_fraction: float = 0.8    # no densification in the final 20%
    prune_opacity_floor: float = 0.005
    split_scale_shrink: float = 1.6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0

    def __post_init__(self):
        for name in ("ssim_weight", "cc_weight", "depth_weight", "opacity_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("densify_grad_threshold", "prune_scale_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class SupervisionFrame:
    """One (frame index, weather) target with optional depth/sky supervision."""

    frame: int
    weather: str
    image: Tensor                  # (H, W, 3) in [0, 1]
    camera: Camera
    depth: Tensor | None = None    # (H, W) meters; <=0 or NaN marks invalid
    sky_mask: Tensor | None = None  # (H, W) bool, True = sky

    def __post_init__(self):
        h, w = self.image.shape[0], self.image.shape[1]
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError(f"image is {h}x{w} but camera renders {self.camera.height}x{self.camera.width}")
        for name in ("depth", "sky_mask"):
            t = getattr(self, name)
            if t is not None and tuple(t.shape) != (h, w):
                raise ValueError(f"{name} shape {tuple(t.shape)} does not match image {h}x{w}")


# -- parameter registry ------------------------------------------------------

QUAT = "quat"    # renormalized after every step
UNIT = "unit01"  # clamped to [0, 1] after every step
PLAIN = "plain"


@dataclass
class ParamEntry:
    name: str
    owner: object          # object with attribute `attr`, or a dict keyed by it
    attr: str
    lr: float
    kind: str = PLAIN

    def get(self) -> Tensor:
        if isinstance(self.owner, dict):
            return self.owner[self.attr]
        return getattr(self.owner, self.attr)

    def set(self, tensor: Tensor) -> None:
        if isinstance(self.owner, dict):
            self.owner[self.attr] = tensor
        else:
            setattr(self.owner, self.attr, tensor)


def collect_parameters(graph: SceneGraph, config: TrainingConfig) -> list[ParamEntry]:
    """All trainable leaves of a scene, with their group learning rates.
    Marks every collected tensor requires_grad."""
    entries: list[ParamEntry] = []
    for node in graph.gaussian_nodes():
        g = node.gaussians
        rot_lr = config.lr_rotation_nonrigid if node.kind == NONRIGID_KIND else config.lr_rotation_other
        entries.append(ParamEntry(f"{node.node_id}.positions", g, "positions", config.lr_base))
        entries.append(ParamEntry(f"{node.node_id}.log_scales", g, "log_scales", config.lr_base))
        entries.append(ParamEntry(f"{node.node_id}.rotations", g, "rotations", rot_lr, QUAT))
        entries.append(ParamEntry(f"{node.node_id}.opacity_logits", g, "opacity_logits", config.lr_base))
        entries.append(ParamEntry(f"{node.node_id}.features", g, "features", config.lr_base))
        if node.offsets is not None:
            entries.append(ParamEntry(f"{node.node_id}.offsets", node, "offsets", config.lr_base))
    for weather, decoder in graph.decoders.items():
        for part in ("w1", "b1", "w2", "b2"):
            entries.append(ParamEntry(f"decoder.{weather}.{part}", decoder, part, config.lr_base))
    for weather in graph.sky.textures:
        entries.append(ParamEntry(f"sky.{weather}", graph.sky.textures, weather, config.lr_base, UNIT))
    for e in entries:
        e.get().requires_grad_(True)
    return entries


class Adam:
    """Adam with per-entry learning rates and representation-preserving hooks.

    Quaternion entries are renormalized and sky textures clamped to [0, 1]
    after every step, so the scene invariants hold by construction.
    """

    def __init__(self, entries: list[ParamEntry], config: TrainingConfig):
        self.entries = entries
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.state: dict[str, dict] = {
            e.name: {"step": 0, "m": torch.zeros_like(e.get()), "v": torch.zeros_like(e.get())}
            for e in entries
        }

    def zero_grad(self) -> None:
        for e in self.entries:
            e.get().grad = None

    @torch.no_grad()
    def step(self) -> None:
        for e in self.entries:
            p = e.get()
            if p.grad is None:
                continue
            adam_step(p, p.grad, self.state[e.name], e.lr,
                      beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            if e.kind == QUAT:
                p.copy_(quat_normalize(p))
            elif e.kind == UNIT:
                p.clamp_(0.0, 1.0)


@torch.no_grad()
def adam_step(param: Tensor, grad: Tensor, state: dict, lr: float, *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> Tensor:
    """One in-place Adam update; `state` holds step count and both moments."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")
    state["step"] += 1
    m, v = state["m"], state["v"]
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    m_hat = m / (1 - beta1 ** state["step"])
    v_hat = v / (1 - beta2 ** state["step"])
    param.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    return param


# -- loss composition --------------------------------------------------------

def total_loss(render: RenderOutput, frame: SupervisionFrame, raw_image: Tensor | None,
               graph: SceneGraph, config: TrainingConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the loss stack for one rendered supervision frame.

    The content term only applies to edited weathers (compared against the
    clear-weather image of the same frame); depth and opacity terms apply
    when their supervision inputs are present.
    """
    parts: dict[str, Tensor] = {}
    parts["rgb"] = rgb_loss(render.rgb, frame.image, config.ssim_weight)
    total = parts["rgb"]
    if frame.weather != RAW_WEATHER and raw_image is not None:
        parts["cc"] = content_loss(render.rgb, raw_image)
        total = total + config.cc_weight * parts["cc"]
    if frame.depth is not None:
        parts["depth"] = depth_loss(render.depth, frame.depth)
        total = total + config.depth_weight * parts["depth"]
    if frame.sky_mask is not None:
        parts["opacity"] = opacity_loss(render.alpha, frame.sky_mask)
        total = total + config.opacity_weight * parts["opacity"]
    parts["reg"] = regularization_loss(graph)
    total = total + parts["reg"]
    return total, {k: float(v.detach()) for k, v in parts.items()}


def render_frame(graph: SceneGraph, frame: int, weather: str, camera: Camera,
                 tile_size: int = 16, strategy: str = "auto") -> RenderOutput:
    """flatten -> project -> rasterize -> sky composite, for one frame."""
    renderables = graph.flatten(frame, weather)
    splats = project(renderables, camera)
    out = rasterize(splats, camera, tile_size=tile_size, strategy=strategy)
    out = composite_sky(out, camera, graph.sky, weather)
    out.node_slices = renderables.node_slices
    out.renderable_count = len(renderables)
    return out


# -- densification -----------------------------------------------------------

class DensifyStats:
    """Per-node running mean of screen-space positional gradient magnitudes."""

    def __init__(self):
        self.grad_sum: dict[str, Tensor] = {}
        self.seen: dict[str, Tensor] = {}

    def accumulate(self, out: RenderOutput) -> None:
        if out.means2d is None or out.means2d.grad is None:
            return
        norms = out.means2d.grad.norm(dim=-1)
        flat = torch.zeros(out.renderable_count, dtype=norms.dtype)
        flat[out.source_index] = norms
        visible = torch.zeros(out.renderable_count, dtype=norms.dtype)
        visible[out.source_index] = 1.0
        for node_id, sl in out.node_slices.items():
            if node_id not in self.grad_sum:
                self.grad_sum[node_id] = flat[sl].clone()
                self.seen[node_id] = visible[sl].clone()
            else:
                self.grad_sum[node_id] += flat[sl]
                self.seen[node_id] += visible[sl]

    def mean(self, node_id: str, n: int) -> Tensor:
        if node_id not in self.grad_sum or self.grad_sum[node_id].shape[0] != n:
            return torch.zeros(n)
        return self.grad_sum[node_id] / self.seen[node_id].clamp_min(1.0)

    def reset(self) -> None:
        self.grad_sum.clear()
        self.seen.clear()


def scene_extent(graph: SceneGraph) -> float:
    """Diagonal of the bounding box of all node Gaussian positions."""
    positions = [n.gaussians.positions for n in graph.gaussian_nodes() if len(n.gaussians)]
    if not positions:
        return 1.0
    pts = torch.cat(positions).detach()
    return float((pts.max(dim=0).values - pts.min(dim=0).values).norm())


@torch.no_grad()
def densify_and_prune(graph: SceneGraph, stats: DensifyStats, config: TrainingConfig,
                      adam: Adam | None = None, extent: float | None = None,
                      generator: torch.Generator | None = None) -> dict[str, int]:
    """Split/clone high-gradient Gaussians and prune transparent or oversized ones.

    Gaussians whose mean accumulated screen gradient exceeds the threshold are
    split in two (scales / 1.6, positions sampled from the parent) when larger
    than the prune-scale reference, else cloned. Gaussians with opacity below
    the floor or world scale above the reference are removed. Optimizer moments
    follow the surgery (zeros for new rows). Accumulators reset.
    """
    if extent is None:
        extent = scene_extent(graph)
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    scale_limit = config.prune_scale_threshold * extent
    report: dict[str, int] = {"cloned": 0, "split": 0, "pruned": 0}

    for node in graph.gaussian_nodes():
        g = node.gaussians
        n = len(g)
        if n == 0:
            continue
        mean_grad = stats.mean(node.node_id, n)
        max_scale = g.log_scales.detach().exp().max(dim=-1).values
        selected = mean_grad > config.densify_grad_threshold
        split_mask = selected & (max_scale > scale_limit)
        clone_mask = selected & ~split_mask

        prune_mask = (g.opacities().detach() < config.prune_opacity_floor) | (max_scale > scale_limit)
        keep = ~(prune_mask | split_mask)

        clone_idx = clone_mask.nonzero(as_tuple=True)[0]
        split_idx = split_mask.nonzero(as_tuple=True)[0]
        if bool(keep.all()) and clone_idx.numel() == 0 and split_idx.numel() == 0:
            continue

        report["cloned"] += int(clone_idx.numel())
        report["split"] += int(split_idx.numel())
        report["pruned"] += int(prune_mask.sum())

        split_idx2 = split_idx.repeat_interleave(2)
        new_positions = _sample_within(g, split_idx2, generator)
        shrink = math.log(config.split_scale_shrink)

        def rebuild(name: str, tensor: Tensor, row_dim: int = 0) -> Tensor:
            kept = tensor.index_select(row_dim, keep.nonzero(as_tuple=True)[0])
            cloned = tensor.index_select(row_dim, clone_idx)
            split = tensor.index_select(row_dim, split_idx2)
            if name == "positions":
                split = new_positions
            elif name == "log_scales":
                split = split - shrink
            out = torch.cat([kept, cloned, split], dim=row_dim)
            _carry_adam_rows(adam, f"{node.node_id}.{name}", keep, clone_idx, split_idx2, row_dim)
            return out.detach().requires_grad_(tensor.requires_grad)

        g.positions = rebuild("positions", g.positions)
        g.log_scales = rebuild("log_scales", g.log_scales)
        g.rotations = rebuild("rotations", g.rotations)
        g.opacity_logits = rebuild("opacity_logits", g.opacity_logits)
        g.features = rebuild("features", g.features)
        if node.offsets is not None:
            node.offsets = rebuild("offsets", node.offsets, row_dim=1)

    stats.reset()
    return report


def _sample_within(g, split_idx2: Tensor, generator: torch.Generator) -> Tensor:
    """Sample split-child positions from the parent Gaussian's own distribution."""
    if split_idx2.numel() == 0:
        return torch.zeros(0, 3, dtype=g.positions.dtype)
    rot = quat_to_rotmat(quat_normalize(g.rotations[split_idx2].detach()))
    stds = g.log_scales[split_idx2].detach().exp()
    xi = torch.randn(split_idx2.shape[0], 3, generator=generator, dtype=stds.dtype)
    return g.positions[split_idx2].detach() + (rot @ (stds * xi).unsqueeze(-1)).squeeze(-1)


def _carry_adam_rows(adam: Adam | None, name: str, keep: Tensor, clone_idx: Tensor,
                     split_idx2: Tensor, row_dim: int) -> None:
    if adam is None or name not in adam.state:
        return
    st = adam.state[name]
    for key in ("m", "v"):
        t = st[key]
        kept = t.index_select(row_dim, keep.nonzero(as_tuple=True)[0])
        shape = list(t.shape)
        shape[row_dim] = int(clone_idx.numel() + split_idx2.numel())
        st[key] = torch.cat([kept, torch.zeros(*shape, dtype=t.dtype)], dim=row_dim)


# -- training loop -----------------------------------------------------------

def train(graph: SceneGraph, frames: list[SupervisionFrame], config: TrainingConfig,
          log_path: str | None = None, tile_size: int = 16,
          strategy: str = "auto") -> list[str]:
    """Optimize the scene against the supervision set; returns the metrics log.

    Deterministic for a fixed config seed (single-threaded torch). Each log
    line records the step, sampled (frame, weather), every loss component,
    and the PSNR of the rendered frame.
    """
    if config.iterations > 0 and not frames:
        raise ValueError("empty supervision set")
    for w in {f.weather for f in frames}:
        if w not in graph.decoders:
            raise KeyError(f"supervision uses weather {w!r} but the scene has no such decoder")

    entries = collect_parameters(graph, config)
    adam = Adam(entries, config)
    rng = torch.Generator().manual_seed(config.seed)
    stats = DensifyStats()
    extent = scene_extent(graph)
    raw_images = {f.frame: f.image for f in frames if f.weather == RAW_WEATHER}
    densify_stop = int(config.densify_stop_fraction * config.iterations)

    log: list[str] = []
    sink = open(log_path, "a") if log_path else None
    try:
        for it in range(config.iterations):
            pick = frames[int(torch.randint(len(frames), (1,), generator=rng))]
            out = render_frame(graph, pick.frame, pick.weather, pick.camera,
                               tile_size=tile_size, strategy=strategy)
            loss, parts = total_loss(out, pick, raw_images.get(pick.frame), graph, config)

            adam.zero_grad()
            loss.backward()
            stats.accumulate(out)
            adam.step()

            quality = psnr(out.rgb.detach().clamp(0, 1), pick.image)
            pieces = " ".join(f"{k}={v:.6f}" for k, v in parts.items())
            line = (f"step={it} frame={pick.frame} weather={pick.weather} "
                    f"{pieces} total={float(loss):.6f} psnr={quality:.3f}")
            log.append(line)
            if sink:
                sink.write(line + "\n")

            if (config.densify_interval > 0 and it + 1 < densify_stop
                    and (it + 1) % config.densify_interval == 0):
                report = densify_and_prune(graph, stats, config, adam, extent, rng)
                note = (f"densify step={it} cloned={report['cloned']} "
                        f"split={report['split']} pruned={report['pruned']}")
                log.append(note)
                if sink:
                    sink.write(note + "\n")
    finally:
        if sink:
            sink.close()
    return log
