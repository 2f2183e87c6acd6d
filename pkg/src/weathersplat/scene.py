"""Weather-aware Gaussian scene graph.

A scene is a set of nodes (sky, static background, rigid and non-rigid
objects, optional weather particle systems) whose Gaussians carry a shared
32-dim appearance feature instead of a color. Per-weather two-layer MLP
decoders turn features into RGB, so geometry is shared across weathers and
only colors differ.

All per-Gaussian state is stored struct-of-arrays as torch tensors
(float64 by default) so the whole render path stays differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import torch
from torch import Tensor

from .transforms import quat_mul, quat_normalize, quat_rotate, quat_to_rotmat

FEATURE_DIM = 32
DECODER_HIDDEN_DIM = 64

DTYPE = torch.float64

RAW_WEATHER = "raw"


@dataclass
class GaussianPrimitives:
    """A batch of Gaussian primitives (position, scale, rotation, opacity, feature).

    Scales are stored as natural logs and opacity as a logit so optimizer
    steps can never produce negative scales or out-of-range opacities.
    """

    positions: Tensor       # (N, 3) world meters
    log_scales: Tensor      # (N, 3) log of per-axis scale in meters
    rotations: Tensor       # (N, 4) quaternion (w, x, y, z)
    opacity_logits: Tensor  # (N,)
    features: Tensor        # (N, FEATURE_DIM)

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "features": (n, FEATURE_DIM),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if tuple(t.shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(t.shape)}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls, dtype: torch.dtype = DTYPE) -> "GaussianPrimitives":
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, FEATURE_DIM))

    def clone(self) -> "GaussianPrimitives":
        return GaussianPrimitives(
            self.positions.clone(), self.log_scales.clone(), self.rotations.clone(),
            self.opacity_logits.clone(), self.features.clone(),
        )

    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def scales(self) -> Tensor:
        return torch.exp(self.log_scales)

    def normalize_rotations_(self) -> None:
        with torch.no_grad():
            self.rotations.copy_(quat_normalize(self.rotations))


def covariance3d(log_scales: Tensor, rotations: Tensor) -> Tensor:
    """World covariance R diag(exp(2*log_scale)) R^T, shape (..., 3, 3).

    Rotations are normalized internally, so callers may pass raw optimizer
    state. Raises on non-finite inputs.
    """
    log_scales = torch.as_tensor(log_scales, dtype=DTYPE) if not torch.is_tensor(log_scales) else log_scales
    rotations = torch.as_tensor(rotations, dtype=DTYPE) if not torch.is_tensor(rotations) else rotations
    if not (torch.isfinite(log_scales).all() and torch.isfinite(rotations).all()):
        raise ValueError("covariance3d: non-finite log_scale or rotation")
    rot = quat_to_rotmat(quat_normalize(rotations))
    var = torch.exp(2.0 * log_scales)
    return rot @ (var.unsqueeze(-1) * rot.transpose(-1, -2))


@dataclass
class WeatherDecoder:
    """Two-layer perceptron (32 -> 64 -> 3) mapping features to RGB in (0,1)."""

    weather: str
    w1: Tensor  # (64, 32)
    b1: Tensor  # (64,)
    w2: Tensor  # (3, 64)
    b2: Tensor  # (3,)

    def __post_init__(self):
        if tuple(self.w1.shape) != (DECODER_HIDDEN_DIM, FEATURE_DIM) or tuple(self.w2.shape) != (3, DECODER_HIDDEN_DIM):
            raise ValueError("decoder layer shapes must be (64,32) and (3,64)")
        if tuple(self.b1.shape) != (DECODER_HIDDEN_DIM,) or tuple(self.b2.shape) != (3,):
            raise ValueError("decoder bias shapes must be (64,) and (3,)")

    @classmethod
    def xavier(cls, weather: str, seed: int = 0, dtype: torch.dtype = DTYPE) -> "WeatherDecoder":
        gen = torch.Generator().manual_seed(seed)
        def layer(rows, cols):
            bound = (6.0 / (rows + cols)) ** 0.5
            return (torch.rand(rows, cols, generator=gen, dtype=dtype) * 2 - 1) * bound
        return cls(
            weather,
            layer(DECODER_HIDDEN_DIM, FEATURE_DIM),
            torch.zeros(DECODER_HIDDEN_DIM, dtype=dtype),
            layer(3, DECODER_HIDDEN_DIM),
            torch.zeros(3, dtype=dtype),
        )

    @classmethod
    def passthrough(cls, weather: str, dtype: torch.dtype = DTYPE) -> "WeatherDecoder":
        """Decoder that outputs sigmoid(feature[0:3]) exactly.

        relu(x) - relu(-x) == x reassembles the first three feature entries
        in the output logits, so importers can seed features with color
        logits and get that color back before any training.
        """
        w1 = torch.zeros(DECODER_HIDDEN_DIM, FEATURE_DIM, dtype=dtype)
        w2 = torch.zeros(3, DECODER_HIDDEN_DIM, dtype=dtype)
        for c in range(3):
            w1[c, c] = 1.0
            w1[3 + c, c] = -1.0
            w2[c, c] = 1.0
            w2[c, 3 + c] = -1.0
        return cls(weather, w1, torch.zeros(DECODER_HIDDEN_DIM, dtype=dtype), w2, torch.zeros(3, dtype=dtype))

    def decode(self, features: Tensor) -> Tensor:
        return decode_color(self, features)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def decode_color(decoder: WeatherDecoder, features: Tensor) -> Tensor:
    """RGB in (0,1) for one feature vector (32,) or a batch (N, 32)."""
    if features.shape[-1] != FEATURE_DIM:
        raise ValueError(f"feature dimension must be {FEATURE_DIM}, got {features.shape[-1]}")
    hidden = torch.relu(features @ decoder.w1.T + decoder.b1)
    return torch.sigmoid(hidden @ decoder.w2.T + decoder.b2)


@dataclass
class SkyNode:
    """Distant sky as per-weather equirectangular textures in [0,1].

    One texture per registered weather label: the sky appearance is part of
    the weather-dependent look and each label's texture is supervised only
    by that label's images.
    """

    textures: dict[str, Tensor] = field(default_factory=dict)

    DEFAULT_HEIGHT = 256
    DEFAULT_WIDTH = 512

    @classmethod
    def constant(cls, weathers: Iterable[str], value: float = 0.5,
                 height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                 dtype: torch.dtype = DTYPE) -> "SkyNode":
        return cls({w: torch.full((height, width, 3), value, dtype=dtype) for w in weathers})

    def texture(self, weather: str) -> Tensor:
        if weather not in self.textures:
            raise KeyError(f"no sky texture for weather {weather!r}")
        return self.textures[weather]

    def clamp_(self) -> None:
        with torch.no_grad():
            for t in self.textures.values():
                t.clamp_(0.0, 1.0)


BACKGROUND_KIND = "background"
RIGID_KIND = "rigid"
NONRIGID_KIND = "nonrigid"


@dataclass
class GaussianNode:
    """A named group of Gaussians with optional per-frame rigid pose.

    Background nodes have no pose (identity at every frame). Non-rigid nodes
    additionally carry per-frame per-Gaussian translation offsets, the
    desk-scale stand-in for a learned deformation field.
    """

    node_id: str
    kind: str
    gaussians: GaussianPrimitives
    pose_rotations: Tensor | None = None     # (F, 4) unit quaternions
    pose_translations: Tensor | None = None  # (F, 3) meters
    offsets: Tensor | None = None            # (F, N, 3) meters, non-rigid only
    visible: bool = True

    def __post_init__(self):
        if self.kind not in (BACKGROUND_KIND, RIGID_KIND, NONRIGID_KIND):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind == BACKGROUND_KIND:
            if self.pose_rotations is not None or self.offsets is not None:
                raise ValueError("background nodes are static: no poses or offsets")
        else:
            if self.pose_rotations is None or self.pose_translations is None:
                raise ValueError(f"{self.kind} node {self.node_id!r} needs per-frame poses")
        if self.kind == NONRIGID_KIND and self.offsets is None:
            raise ValueError(f"non-rigid node {self.node_id!r} needs per-frame offsets")

    @classmethod
    def background(cls, gaussians: GaussianPrimitives, node_id: str = "background") -> "GaussianNode":
        return cls(node_id, BACKGROUND_KIND, gaussians)

    @classmethod
    def rigid(cls, node_id: str, gaussians: GaussianPrimitives, frame_count: int) -> "GaussianNode":
        rot = torch.zeros(frame_count, 4, dtype=DTYPE)
        rot[:, 0] = 1.0
        return cls(node_id, RIGID_KIND, gaussians, rot, torch.zeros(frame_count, 3, dtype=DTYPE))

    @classmethod
    def nonrigid(cls, node_id: str, gaussians: GaussianPrimitives, frame_count: int) -> "GaussianNode":
        node = cls.rigid(node_id, gaussians, frame_count)
        return cls(node_id, NONRIGID_KIND, gaussians, node.pose_rotations, node.pose_translations,
                   torch.zeros(frame_count, len(gaussians), 3, dtype=DTYPE))

    def frame_count(self) -> int | None:
        return None if self.pose_rotations is None else self.pose_rotations.shape[0]


@dataclass
class Renderables:
    """Flattened, render-ready Gaussian set for one (frame, weather) pair.

    `node_slices` maps trainable node ids to index ranges so screen-space
    gradient statistics can be scattered back for densification. Particle
    Gaussians appended by weather nodes carry no slice (they are not trained).
    """

    positions: Tensor    # (M, 3)
    covariances: Tensor  # (M, 3, 3)
    opacities: Tensor    # (M,)
    colors: Tensor       # (M, 3)
    node_slices: dict[str, slice] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]


class SceneGraph:
    """Sky + background + rigid + non-rigid + weather nodes, with per-weather decoders."""

    def __init__(self, background: GaussianNode, frame_count: int,
                 sky: SkyNode | None = None,
                 rigid_nodes: list[GaussianNode] | None = None,
                 nonrigid_nodes: list[GaussianNode] | None = None,
                 decoders: dict[str, WeatherDecoder] | None = None):
        if frame_count < 1:
            raise ValueError("frame_count must be positive")
        self.background = background
        self.frame_count = frame_count
        self.sky = sky if sky is not None else SkyNode.constant([RAW_WEATHER])
        self.rigid_nodes = list(rigid_nodes or [])
        self.nonrigid_nodes = list(nonrigid_nodes or [])
        self.weather_nodes = []  # particle systems; appended by timelines, never trained
        self.decoders: dict[str, WeatherDecoder] = dict(decoders or {})
        if RAW_WEATHER not in self.decoders:
            self.decoders[RAW_WEATHER] = WeatherDecoder.xavier(RAW_WEATHER)
        self._check()

    def _check(self) -> None:
        ids = [n.node_id for n in self.gaussian_nodes()]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate node ids: {ids}")
        for node in self.gaussian_nodes():
            fc = node.frame_count()
            if fc is not None and fc != self.frame_count:
                raise ValueError(f"node {node.node_id!r} has {fc} pose frames, scene has {self.frame_count}")
        for w in self.decoders:
            if w not in self.sky.textures:
                self.sky.textures[w] = torch.full(
                    (SkyNode.DEFAULT_HEIGHT, SkyNode.DEFAULT_WIDTH, 3), 0.5, dtype=DTYPE)

    def gaussian_nodes(self) -> list[GaussianNode]:
        return [self.background, *self.rigid_nodes, *self.nonrigid_nodes]

    def node(self, node_id: str) -> GaussianNode:
        for node in self.gaussian_nodes():
            if node.node_id == node_id:
                return node
        raise KeyError(f"unknown node {node_id!r}")

    def weathers(self) -> list[str]:
        return sorted(self.decoders)

    def register_weather(self, weather: str, decoder: WeatherDecoder | None = None,
                         seed: int = 0) -> WeatherDecoder:
        if weather in self.decoders:
            raise ValueError(f"weather {weather!r} already registered")
        self.decoders[weather] = decoder or WeatherDecoder.xavier(weather, seed=seed)
        if weather not in self.sky.textures:
            base = self.sky.textures.get(RAW_WEATHER)
            self.sky.textures[weather] = (base.clone() if base is not None else
                                          torch.full((SkyNode.DEFAULT_HEIGHT, SkyNode.DEFAULT_WIDTH, 3), 0.5, dtype=DTYPE))
        return self.decoders[weather]

    # -- editing -----------------------------------------------------------

    def set_node_visibility(self, node_id: str, visible: bool) -> None:
        self.node(node_id).visible = bool(visible)

    def set_node_pose(self, node_id: str, frame: int, rotation, translation) -> None:
        node = self.node(node_id)
        if node.kind == BACKGROUND_KIND:
            raise ValueError(f"node {node_id!r} is static; only rigid/non-rigid nodes take poses")
        if not 0 <= frame < self.frame_count:
            raise IndexError(f"frame {frame} out of range [0, {self.frame_count})")
        with torch.no_grad():
            node.pose_rotations[frame] = quat_normalize(torch.as_tensor(rotation, dtype=DTYPE))
            node.pose_translations[frame] = torch.as_tensor(translation, dtype=DTYPE)

    # -- flattening --------------------------------------------------------

    def flatten(self, frame: int, weather: str) -> Renderables:
        """Renderable {position, covariance, opacity, color} set for one frame.

        Node Gaussians are posed into world space and colored through the
        selected weather decoder; attached particle systems append their
        emitted Gaussians with fixed base colors, bypassing the decoder.
        """
        if weather not in self.decoders:
            raise KeyError(f"unknown weather {weather!r}; registered: {self.weathers()}")
        if not 0 <= frame < self.frame_count:
            raise IndexError(f"frame {frame} out of range [0, {self.frame_count})")

        decoder = self.decoders[weather]
        positions, covariances, opacities, colors = [], [], [], []
        node_slices: dict[str, slice] = {}
        cursor = 0

        for node in self.gaussian_nodes():
            if not node.visible or len(node.gaussians) == 0:
                continue
            g = node.gaussians
            rot = quat_normalize(g.rotations)
            pos = g.positions
            if node.pose_rotations is not None:
                pose_q = quat_normalize(node.pose_rotations[frame])
                pos = quat_rotate(pose_q, pos) + node.pose_translations[frame]
                rot = quat_mul(pose_q, rot)
            if node.offsets is not None:
                pos = pos + node.offsets[frame]
            positions.append(pos)
            covariances.append(covariance3d(g.log_scales, rot))
            opacities.append(torch.sigmoid(g.opacity_logits))
            colors.append(decode_color(decoder, g.features))
            node_slices[node.node_id] = slice(cursor, cursor + len(g))
            cursor += len(g)

        for ps in self.weather_nodes:
            prims, fixed_colors = ps.emit_gaussians()
            if len(prims) == 0:
                continue
            positions.append(prims.positions)
            covariances.append(covariance3d(prims.log_scales, quat_normalize(prims.rotations)))
            opacities.append(torch.sigmoid(prims.opacity_logits))
            colors.append(fixed_colors)
            cursor += len(prims)

        if not positions:
            e = GaussianPrimitives.empty()
            return Renderables(e.positions, torch.zeros(0, 3, 3, dtype=DTYPE), e.opacity_logits, torch.zeros(0, 3, dtype=DTYPE))
        return Renderables(
            torch.cat(positions), torch.cat(covariances), torch.cat(opacities), torch.cat(colors),
            node_slices,
        )
