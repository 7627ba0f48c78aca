"""Rotations, pinhole cameras, bilinear sampling and barycentric coordinates.

Conventions used throughout the package:

- Everything is ``torch.float64``; helpers accept anything ``torch.as_tensor``
  understands and keep autograd graphs intact when given tensors.
- Quaternions are ``(w, x, y, z)``.
- Cameras follow the OpenCV convention (x right, y down, z forward) and the
  extrinsics map world points to camera space: ``x_cam = R @ x_world + t``.
- Texel/pixel ``(i, j)`` (column, row) sits at continuous coordinate
  ``(i, j)``; the rasterizer and the sampler share this convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import BehindCameraError, DegenerateTriangleError, InvalidArgument

DTYPE = torch.float64
MIN_DEPTH = 1e-8
_SMALL_ANGLE = 1e-6


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


# --------------------------------------------------------------------------
# rotation conversions (batched over leading dims, differentiable)
# --------------------------------------------------------------------------


def _angle_and_safe(v: Tensor):
    angle_sq = (v * v).sum(-1, keepdim=True)
    small = angle_sq < _SMALL_ANGLE**2
    # keep the unused branch finite so gradients never see 0/0
    safe_sq = torch.where(small, torch.ones_like(angle_sq), angle_sq)
    return torch.sqrt(safe_sq), angle_sq, small


def axis_angle_to_matrix(v) -> Tensor:
    """Rodrigues formula, ``(..., 3) -> (..., 3, 3)``."""
    v = as_tensor(v)
    angle, angle_sq, small = _angle_and_safe(v)
    a = torch.where(small, 1.0 - angle_sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - angle_sq / 24.0, (1.0 - torch.cos(angle)) / (angle * angle))
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=DTYPE).expand(K.shape)
    return eye + a[..., None] * K + b[..., None] * (K @ K)


def axis_angle_to_quat(v) -> Tensor:
    v = as_tensor(v)
    angle, angle_sq, small = _angle_and_safe(v)
    half = 0.5 * angle
    s = torch.where(small, 0.5 - angle_sq / 48.0, torch.sin(half) / angle)
    w = torch.where(small, 1.0 - angle_sq / 8.0, torch.cos(half))
    return torch.cat([w, s * v], -1)


def quat_normalize(q) -> Tensor:
    q = as_tensor(q)
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        -1,
    )


def quat_to_matrix(q) -> Tensor:
    """Unit quaternion to rotation matrix. ``q`` is normalized first."""
    w, x, y, z = quat_normalize(q).unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def matrix_to_quat(R) -> Tensor:
    """Shepperd's method; returns quaternions with ``w >= 0``."""
    R = as_tensor(R)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    cands = torch.stack([trace, m00, m11, m22], -1)
    choice = cands.argmax(-1)

    def _branch(k):
        if k == 0:
            s = torch.sqrt(torch.clamp(1.0 + trace, min=1e-30)) * 2
            return torch.stack(
                [0.25 * s, (R[..., 2, 1] - R[..., 1, 2]) / s, (R[..., 0, 2] - R[..., 2, 0]) / s,
                 (R[..., 1, 0] - R[..., 0, 1]) / s], -1)
        if k == 1:
            s = torch.sqrt(torch.clamp(1.0 + m00 - m11 - m22, min=1e-30)) * 2
            return torch.stack(
                [(R[..., 2, 1] - R[..., 1, 2]) / s, 0.25 * s, (R[..., 0, 1] + R[..., 1, 0]) / s,
                 (R[..., 0, 2] + R[..., 2, 0]) / s], -1)
        if k == 2:
            s = torch.sqrt(torch.clamp(1.0 - m00 + m11 - m22, min=1e-30)) * 2
            return torch.stack(
                [(R[..., 0, 2] - R[..., 2, 0]) / s, (R[..., 0, 1] + R[..., 1, 0]) / s, 0.25 * s,
                 (R[..., 1, 2] + R[..., 2, 1]) / s], -1)
        s = torch.sqrt(torch.clamp(1.0 - m00 - m11 + m22, min=1e-30)) * 2
        return torch.stack(
            [(R[..., 1, 0] - R[..., 0, 1]) / s, (R[..., 0, 2] + R[..., 2, 0]) / s,
             (R[..., 1, 2] + R[..., 2, 1]) / s, 0.25 * s], -1)

    q = torch.zeros(R.shape[:-2] + (4,), dtype=DTYPE)
    for k in range(4):
        q = torch.where((choice == k)[..., None], _branch(k), q)
    q = torch.where(q[..., :1] < 0, -q, q)
    return quat_normalize(q)


def quat_to_axis_angle(q) -> Tensor:
    q = quat_normalize(q)
    q = torch.where(q[..., :1] < 0, -q, q)
    w, xyz = q[..., :1], q[..., 1:]
    sin_half = torch.linalg.norm(xyz, dim=-1, keepdim=True)
    angle = 2.0 * torch.atan2(sin_half, w)
    small = sin_half < 1e-12
    scale = torch.where(small, 2.0 / torch.clamp(w, min=1e-30), angle / torch.where(small, torch.ones_like(sin_half), sin_half))
    return scale * xyz


def matrix_to_axis_angle(R) -> Tensor:
    return quat_to_axis_angle(matrix_to_quat(R))


def nearest_rotation(M) -> Tensor:
    """Polar projection of ``(..., 3, 3)`` matrices onto SO(3)."""
    M = as_tensor(M)
    U, _, Vh = torch.linalg.svd(M)
    det = torch.linalg.det(U @ Vh)
    D = torch.ones(M.shape[:-1], dtype=DTYPE)
    D[..., 2] = torch.sign(det)
    return U @ torch.diag_embed(D) @ Vh


class Rotation:
    """Batch of rotations stored as unit quaternions ``(..., 4)``."""

    def __init__(self, quat):
        self.quat = quat_normalize(quat)

    @classmethod
    def identity(cls, *shape: int) -> "Rotation":
        q = torch.zeros(shape + (4,), dtype=DTYPE)
        q[..., 0] = 1.0
        return cls(q)

    @classmethod
    def from_axis_angle(cls, v) -> "Rotation":
        return cls(axis_angle_to_quat(v))

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(R))

    def as_matrix(self) -> Tensor:
        return quat_to_matrix(self.quat)

    def as_axis_angle(self) -> Tensor:
        return quat_to_axis_angle(self.quat)

    def apply(self, vecs) -> Tensor:
        return (self.as_matrix() @ as_tensor(vecs)[..., None])[..., 0]

    def inverse(self) -> "Rotation":
        conj = self.quat * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=DTYPE)
        return Rotation(conj)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def __repr__(self) -> str:
        return f"Rotation(quat={self.quat.tolist()})"


def axis_angle_to_rotation(v) -> Rotation:
    v = as_tensor(v)
    if v.shape[-1:] != (3,):
        raise InvalidArgument(f"axis-angle vectors need a trailing dimension of 3, got {tuple(v.shape)}")
    if not torch.isfinite(v).all():
        raise InvalidArgument("axis-angle vector must be finite")
    return Rotation.from_axis_angle(v)


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` form the viewing matrix."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: Tensor = field(default_factory=lambda: torch.eye(3, dtype=DTYPE))
    translation: Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DTYPE))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image size must be at least 1x1")
        self.rotation = as_tensor(self.rotation)
        self.translation = as_tensor(self.translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx=500.0, fy=None, width=256, height=256,
                cx=None, cy=None) -> "Camera":
        """World-space camera at ``eye`` looking at ``target`` with image y pointing against ``up``."""
        eye, target, up = as_tensor(eye), as_tensor(target), as_tensor(up)
        forward = target - eye
        forward = forward / torch.linalg.norm(forward)
        right = torch.linalg.cross(forward, up)
        right = right / torch.linalg.norm(right)
        down = torch.linalg.cross(forward, right)
        R = torch.stack([right, down, forward])
        return cls(
            fx=float(fx), fy=float(fy if fy is not None else fx),
            cx=float(cx if cx is not None else (width - 1) / 2), cy=float(cy if cy is not None else (height - 1) / 2),
            width=int(width), height=int(height), rotation=R, translation=-(R @ eye),
        )

    def to_camera(self, points) -> Tensor:
        return as_tensor(points) @ self.rotation.T + self.translation

    def with_extrinsics(self, rotation, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, rotation, translation)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": self.rotation.detach().tolist(), "translation": self.translation.detach().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        rot = as_tensor(d.get("rotation", torch.eye(3)))
        if rot.shape == (3,):
            rot = axis_angle_to_matrix(rot)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                   int(d["height"]), rot, as_tensor(d.get("translation", [0.0, 0.0, 0.0])))


def project_points(points, cam: Camera) -> tuple[Tensor, Tensor]:
    """Batched projection ``(..., 3) -> (..., 2), (...)``; no depth check."""
    pc = cam.to_camera(points)
    z = pc[..., 2]
    safe_z = torch.where(z.abs() < MIN_DEPTH, torch.full_like(z, MIN_DEPTH), z)
    u = cam.fx * pc[..., 0] / safe_z + cam.cx
    v = cam.fy * pc[..., 1] / safe_z + cam.cy
    return torch.stack([u, v], -1), z


def project(point, cam: Camera) -> tuple[Tensor, Tensor]:
    """Project one world point to pixels; returns ``(uv, depth)``.

    Raises:
        BehindCameraError: camera-space depth is at most 1e-8.
    """
    point = as_tensor(point)
    if not torch.isfinite(point).all():
        raise InvalidArgument("point must be finite")
    uv, z = project_points(point, cam)
    if float(z) <= MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {float(z):.3g}")
    return uv, z


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_bilinear_batch(fmap, pts) -> Tensor:
    """Sample an ``(H, W, C)`` map at ``(N, 2)`` pixel coordinates with edge clamping."""
    fmap, pts = as_tensor(fmap), as_tensor(pts)
    H, W = fmap.shape[:2]
    x = pts[..., 0].clamp(0.0, W - 1.0)
    y = pts[..., 1].clamp(0.0, H - 1.0)
    x0 = torch.floor(x).detach().long().clamp(max=max(W - 2, 0))
    y0 = torch.floor(y).detach().long().clamp(max=max(H - 2, 0))
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    fx = (x - x0.to(DTYPE))[..., None]
    fy = (y - y0.to(DTYPE))[..., None]
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bottom = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def sample_bilinear(fmap, p) -> Tensor:
    fmap, p = as_tensor(fmap), as_tensor(p)
    if fmap.numel() == 0:
        raise InvalidArgument("feature map is empty")
    if torch.isnan(p).any():
        raise InvalidArgument("sample coordinate is NaN")
    return sample_bilinear_batch(fmap, p[None])[0]


# --------------------------------------------------------------------------
# barycentric coordinates
# --------------------------------------------------------------------------


def barycentric_batch(tri, pts) -> Tensor:
    """Barycentrics of ``pts (..., 2)`` w.r.t. triangles ``tri (..., 3, 2)``; no degeneracy check."""
    tri, pts = as_tensor(tri), as_tensor(pts)
    v0, v1, v2 = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    e1, e2, d = v1 - v0, v2 - v0, pts - v0
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    b1 = (d[..., 0] * e2[..., 1] - d[..., 1] * e2[..., 0]) / det
    b2 = (e1[..., 0] * d[..., 1] - e1[..., 1] * d[..., 0]) / det
    return torch.stack([1.0 - b1 - b2, b1, b2], -1)


def barycentric_of_point(tri, p) -> Tensor:
    tri, p = as_tensor(tri), as_tensor(p)
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    twice_area = float(e1[0] * e2[1] - e1[1] * e2[0])
    if abs(twice_area) <= 1e-12 or not math.isfinite(twice_area):
        raise DegenerateTriangleError("triangle has (near) zero area")
    return barycentric_batch(tri, p)
