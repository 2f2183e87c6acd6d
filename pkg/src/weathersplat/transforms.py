"""Quaternion and rigid-transform helpers (torch, batched, differentiable).

Quaternions are stored as (w, x, y, z) and treated as rotations in the
Hamilton convention. All functions accept either a single quaternion of
shape (4,) or a batch of shape (N, 4) and broadcast accordingly.
"""
from __future__ import annotations

import torch
from torch import Tensor


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    """Return q scaled to unit norm. Differentiable; safe for tiny norms."""
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit quaternion(s) -> rotation matrix/matrices of shape (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a*b; the rotation that applies b first, then a."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vector(s) v of shape (..., 3) by unit quaternion(s) q."""
    return (quat_to_rotmat(q) @ v.unsqueeze(-1)).squeeze(-1)


def quat_from_axis_angle(axis: Tensor, angle: float | Tensor) -> Tensor:
    """Unit quaternion for a rotation of `angle` radians about `axis`."""
    axis = axis / axis.norm(dim=-1, keepdim=True)
    angle = torch.as_tensor(angle, dtype=axis.dtype)
    half = angle / 2.0
    return torch.cat([torch.cos(half).reshape(*axis.shape[:-1], 1), axis * torch.sin(half).reshape(*axis.shape[:-1], 1)], dim=-1)


def rotation_between(src: Tensor, dst: Tensor, eps: float = 1e-12) -> Tensor:
    """Smallest rotation matrix mapping unit direction src onto unit dst.

    Shapes (..., 3). Antiparallel inputs rotate 180 degrees about an
    arbitrary perpendicular axis.
    """
    src = src / src.norm(dim=-1, keepdim=True).clamp_min(eps)
    dst = dst / dst.norm(dim=-1, keepdim=True).clamp_min(eps)
    v = torch.cross(src, dst, dim=-1)
    c = (src * dst).sum(-1, keepdim=True)

    # Rodrigues: R = I + [v]x + [v]x^2 / (1 + c); degenerate when c -> -1.
    vx = skew(v)
    eye = torch.eye(3, dtype=src.dtype).expand(*src.shape[:-1], 3, 3)
    denom = (1.0 + c).clamp_min(eps).unsqueeze(-1)
    rot = eye + vx + (vx @ vx) / denom

    anti = (c.squeeze(-1) < -1.0 + 1e-8)
    if anti.any():
        perp = torch.zeros_like(src)
        # pick the world axis least aligned with src to build a perpendicular
        smallest = src.abs().argmin(dim=-1, keepdim=True)
        perp.scatter_(-1, smallest, 1.0)
        axis = torch.cross(src, perp, dim=-1)
        axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(eps)
        flip = quat_to_rotmat(quat_from_axis_angle(axis, torch.pi))
        rot = torch.where(anti.unsqueeze(-1).unsqueeze(-1), flip, rot)
    return rot


def skew(v: Tensor) -> Tensor:
    """Cross-product matrix [v]x of shape (..., 3, 3)."""
    zero = torch.zeros_like(v[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
            torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
            torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )
