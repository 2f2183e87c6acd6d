"""Serialization: scene archives, splat PLY import, images, depth rasters,
supervision manifests, and the synthetic dataset generator.

Byte-level layouts are documented in docs/formats.md. All multi-byte values
are little-endian; numeric arrays are stored as float32. Loaders validate
eagerly and raise FormatError with the offending byte offset rather than
returning partial data.
"""
from __future__ import annotations

import io as _io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .rasterizer import Camera
from .scene import (BACKGROUND_KIND, DTYPE, FEATURE_DIM, NONRIGID_KIND,
                    RIGID_KIND, GaussianNode, GaussianPrimitives, SceneGraph,
                    SkyNode, WeatherDecoder)
from .training import SupervisionFrame

ARCHIVE_MAGIC = b"WCTY"
ARCHIVE_VERSION = 1
DEPTH_MAGIC = b"DPF1"

SH0 = 0.28209479177387814  # zeroth spherical-harmonic basis constant


class FormatError(ValueError):
    """Malformed input file; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


# -- low-level readers/writers ------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = _io.BytesIO()

    def bytes_(self, b: bytes):
        self.buf.write(b)

    def u8(self, v: int):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v: int):
        self.buf.write(struct.pack("<Q", v))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.bytes_(raw)

    def f32_array(self, t: torch.Tensor):
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        self.bytes_(arr.tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated: needed {n} bytes", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        return self.take(n).decode("utf-8")

    def f32_array(self, shape: tuple[int, ...]) -> torch.Tensor:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return torch.from_numpy(arr.astype(np.float64))

    def done(self) -> bool:
        return self.pos >= len(self.data)


# -- scene archive -------------------------------------------------------------

_KIND_CODE = {BACKGROUND_KIND: 0, RIGID_KIND: 1, NONRIGID_KIND: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def save_scene(graph: SceneGraph, path: str | Path) -> None:
    """Write the scene graph as a WCTY archive (arrays quantized to f32)."""
    w = _Writer()
    w.bytes_(ARCHIVE_MAGIC)
    w.u32(ARCHIVE_VERSION)

    def section(tag: bytes, payload: bytes):
        w.bytes_(tag)
        w.u64(len(payload))
        w.bytes_(payload)

    meta = _Writer()
    nodes = graph.gaussian_nodes()
    meta.u32(graph.frame_count)
    meta.u32(len(nodes))
    meta.u32(len(graph.decoders))
    meta.u32(len(graph.sky.textures))
    section(b"META", meta.getvalue())

    for node in nodes:
        p = _Writer()
        p.string(node.node_id)
        p.u8(_KIND_CODE[node.kind])
        p.u8(1 if node.visible else 0)
        g = node.gaussians
        p.u32(len(g))
        for t in (g.positions, g.log_scales, g.rotations, g.opacity_logits, g.features):
            p.f32_array(t)
        p.u8(1 if node.pose_rotations is not None else 0)
        if node.pose_rotations is not None:
            p.f32_array(node.pose_rotations)
            p.f32_array(node.pose_translations)
        p.u8(1 if node.offsets is not None else 0)
        if node.offsets is not None:
            p.f32_array(node.offsets)
        section(b"NODE", p.getvalue())

    for weather in sorted(graph.decoders):
        dec = graph.decoders[weather]
        p = _Writer()
        p.string(weather)
        for t in (dec.w1, dec.b1, dec.w2, dec.b2):
            p.f32_array(t)
        section(b"DECO", p.getvalue())

    for weather in sorted(graph.sky.textures):
        tex = graph.sky.textures[weather]
        p = _Writer()
        p.string(weather)
        p.u32(tex.shape[0])
        p.u32(tex.shape[1])
        p.f32_array(tex)
        section(b"SKYT", p.getvalue())

    Path(path).write_bytes(w.getvalue())


def load_scene(path: str | Path) -> SceneGraph:
    """Read a WCTY archive back into a SceneGraph (f32 values upcast to f64)."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != ARCHIVE_MAGIC:
        raise FormatError("bad magic, not a WCTY archive", 0)
    version = r.u32()
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}", 4)

    frame_count = None
    background = None
    rigid_nodes: list[GaussianNode] = []
    nonrigid_nodes: list[GaussianNode] = []
    decoders: dict[str, WeatherDecoder] = {}
    textures: dict[str, torch.Tensor] = {}

    while not r.done():
        tag = r.take(4)
        length = r.u64()
        body = _Reader(r.take(length))
        if tag == b"META":
            frame_count = body.u32()
            body.u32(), body.u32(), body.u32()
        elif tag == b"NODE":
            if frame_count is None:
                raise FormatError("NODE section before META", r.pos)
            node = _read_node(body, frame_count)
            if node.kind == BACKGROUND_KIND:
                if background is not None:
                    raise FormatError("multiple background nodes", r.pos)
                background = node
            elif node.kind == RIGID_KIND:
                rigid_nodes.append(node)
            else:
                nonrigid_nodes.append(node)
        elif tag == b"DECO":
            weather = body.string()
            decoders[weather] = WeatherDecoder(
                weather,
                body.f32_array((64, FEATURE_DIM)), body.f32_array((64,)),
                body.f32_array((3, 64)), body.f32_array((3,)),
            )
        elif tag == b"SKYT":
            weather = body.string()
            h, wdt = body.u32(), body.u32()
            textures[weather] = body.f32_array((h, wdt, 3))
        else:
            raise FormatError(f"unknown section tag {tag!r}", r.pos - 12)

    if frame_count is None or background is None:
        raise FormatError("archive missing META or background NODE section")
    graph = SceneGraph(background, frame_count, sky=SkyNode(textures),
                       rigid_nodes=rigid_nodes, nonrigid_nodes=nonrigid_nodes,
                       decoders=decoders)
    return graph


def _read_node(body: _Reader, frame_count: int) -> GaussianNode:
    node_id = body.string()
    kind = _CODE_KIND.get(body.u8())
    if kind is None:
        raise FormatError(f"unknown node kind in node {node_id!r}", body.pos)
    visible = bool(body.u8())
    n = body.u32()
    prims = GaussianPrimitives(
        body.f32_array((n, 3)), body.f32_array((n, 3)), body.f32_array((n, 4)),
        body.f32_array((n,)), body.f32_array((n, FEATURE_DIM)),
    )
    pose_rotations = pose_translations = offsets = None
    if body.u8():
        pose_rotations = body.f32_array((frame_count, 4))
        pose_translations = body.f32_array((frame_count, 3))
    if body.u8():
        if pose_rotations is None:
            raise FormatError(f"node {node_id!r} has offsets but no poses", body.pos)
        offsets = body.f32_array((frame_count, n, 3))
    return GaussianNode(node_id, kind, prims, pose_rotations, pose_translations, offsets, visible)


# -- splat PLY import ----------------------------------------------------------

REQUIRED_PLY_PROPERTIES = ("x", "y", "z", "scale_0", "scale_1", "scale_2",
                           "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
                           "f_dc_0", "f_dc_1", "f_dc_2")


def import_splat_ply(path: str | Path, seed: int = 0) -> GaussianNode:
    """Load a binary-little-endian splat PLY as a background node.

    scale_* hold log scales and opacity a logit, matching the splat
    ecosystem convention. The DC color (0.5 + SH0 * f_dc) lands in the first
    three feature entries as color logits so a passthrough decoder
    reproduces it; remaining feature entries get small seeded noise.
    """
    raw = Path(path).read_bytes()
    header_end = raw.find(b"end_header\n")
    if header_end < 0:
        raise FormatError("missing end_header", 0)
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    if not header or header[0].strip() != "ply":
        raise FormatError("not a PLY file", 0)

    fmt = next((ln for ln in header if ln.startswith("format")), "")
    if "binary_little_endian" not in fmt:
        raise FormatError(f"unsupported PLY format: {fmt!r}", 0)

    count = None
    props: list[str] = []
    in_vertex = False
    for line in header:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise FormatError(f"property {parts[2]!r} has unsupported type {parts[1]!r}", 0)
            props.append(parts[2])
    if count is None:
        raise FormatError("no vertex element", 0)
    for needed in REQUIRED_PLY_PROPERTIES:
        if needed not in props:
            raise FormatError(f"missing required vertex property {needed!r}", 0)

    body_offset = header_end + len(b"end_header\n")
    expected = count * 4 * len(props)
    if len(raw) - body_offset < expected:
        raise FormatError(f"vertex data truncated: expected {expected} bytes", body_offset)
    table = np.frombuffer(raw, dtype="<f4", count=count * len(props),
                          offset=body_offset).reshape(count, len(props))
    col = {name: torch.from_numpy(table[:, i].astype(np.float64)) for i, name in enumerate(props)}

    gen = torch.Generator().manual_seed(seed)
    features = (torch.rand(count, FEATURE_DIM, generator=gen, dtype=DTYPE) - 0.5) * 0.02
    dc = torch.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], dim=-1)
    color = (0.5 + SH0 * dc).clamp(1e-4, 1 - 1e-4)
    features[:, :3] = torch.log(color / (1 - color))

    prims = GaussianPrimitives(
        positions=torch.stack([col["x"], col["y"], col["z"]], dim=-1),
        log_scales=torch.stack([col["scale_0"], col["scale_1"], col["scale_2"]], dim=-1),
        rotations=torch.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], dim=-1),
        opacity_logits=col["opacity"],
        features=features,
    )
    return GaussianNode.background(prims)


# -- images, masks, depth --------------------------------------------------------

def save_image(path: str | Path, image: torch.Tensor) -> None:
    """Write an (H, W, 3) float image in [0,1] as 8-bit PNG (or PPM by suffix)."""
    arr = (image.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def load_image(path: str | Path) -> torch.Tensor:
    img = Image.open(str(path)).convert("RGB")
    return torch.from_numpy(np.asarray(img).astype(np.float64) / 255.0)


def save_mask(path: str | Path, mask: torch.Tensor) -> None:
    arr = np.where(mask.detach().numpy(), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(str(path))


def load_mask(path: str | Path) -> torch.Tensor:
    img = Image.open(str(path)).convert("L")
    return torch.from_numpy(np.asarray(img) > 127)


def save_depth(path: str | Path, depth: torch.Tensor) -> None:
    """f32 raster: 16-byte header (magic, width, height, reserved) + row-major data."""
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<III", w, h, 0)
    data = np.ascontiguousarray(depth.detach().numpy(), dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def load_depth(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("depth raster shorter than its header", 0)
    if raw[:4] != DEPTH_MAGIC:
        raise FormatError("bad depth raster magic", 0)
    w, h, _ = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * w * h
    if len(raw) != expected:
        raise FormatError(f"depth raster size mismatch: expected {expected} bytes, got {len(raw)}", 16)
    arr = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w)
    return torch.from_numpy(arr.astype(np.float64))


# -- supervision manifest --------------------------------------------------------

def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": float(camera.fx), "fy": float(camera.fy),
        "cx": float(camera.cx), "cy": float(camera.cy),
        "width": camera.width, "height": camera.height,
        "near": float(camera.near), "far": float(camera.far),
        "rotation": [float(v) for v in camera.rotation.reshape(-1)],
        "translation": [float(v) for v in camera.translation],
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=torch.tensor(d["rotation"], dtype=DTYPE).reshape(3, 3),
                  translation=torch.tensor(d["translation"], dtype=DTYPE),
                  width=d["width"], height=d["height"],
                  near=d.get("near", 0.1), far=d.get("far", 1000.0))


def load_supervision(manifest_path: str | Path) -> list[SupervisionFrame]:
    """Load every (frame, weather) target listed in a YAML manifest.

    Image/depth/mask paths are resolved relative to the manifest. Dimension
    mismatches and missing files raise with the offending frame named.
    """
    manifest_path = Path(manifest_path)
    doc = yaml.safe_load(manifest_path.read_text())
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FormatError(f"{manifest_path}: manifest must contain a 'frames' list")
    base = manifest_path.parent
    frames: list[SupervisionFrame] = []
    for entry in doc["frames"]:
        t = int(entry["frame"])
        camera = camera_from_dict(entry["camera"])
        depth = sky_mask = None
        if entry.get("depth"):
            depth = load_depth(base / entry["depth"])
            _check_dims(depth.shape, camera, f"frame {t} depth")
        if entry.get("sky_mask"):
            sky_mask = load_mask(base / entry["sky_mask"])
            _check_dims(sky_mask.shape, camera, f"frame {t} sky mask")
        for weather, rel in sorted(entry["images"].items()):
            img_path = base / rel
            if not img_path.exists():
                raise FormatError(f"frame {t} weather {weather!r}: missing image {img_path}")
            image = load_image(img_path)
            _check_dims(image.shape[:2], camera, f"frame {t} weather {weather!r} image")
            frames.append(SupervisionFrame(t, weather, image, camera, depth=depth, sky_mask=sky_mask))
    return frames


def _check_dims(shape, camera: Camera, what: str) -> None:
    if tuple(shape)[:2] != (camera.height, camera.width):
        raise FormatError(f"{what}: dimensions {tuple(shape)[:2]} do not match "
                          f"camera {camera.height}x{camera.width}")


def validate_supervision(frames: list[SupervisionFrame], graph: SceneGraph) -> None:
    """Every weather used by the supervision must have a registered decoder."""
    used = {f.weather for f in frames}
    missing = used - set(graph.decoders)
    if missing:
        raise FormatError(f"supervision references unregistered weathers: {sorted(missing)}")

