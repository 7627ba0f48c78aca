"""Gaussian avatar: template splats on mesh vertices plus UV splats rigged to triangles."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateTriangleError, InvalidArgument
from .geometry import DTYPE, as_tensor, matrix_to_quat, quat_multiply, quat_normalize, quat_to_axis_angle

DEFAULT_LATENT_DIM = 32
DEGENERATE_AREA = 1e-12


@dataclass
class GaussianSet:
    means: Tensor  # (n, 3)
    quats: Tensor  # (n, 4) wxyz
    scales: Tensor  # (n, 3), > 0
    opacity: Tensor  # (n,), in [0, 1]
    features: Tensor  # (n, C); channels 0-2 are linear RGB

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n = len(self)
        for name, shape in (("quats", (n, 4)), ("scales", (n, 3)), ("opacity", (n,))):
            if tuple(getattr(self, name).shape) != shape:
                raise InvalidArgument(f"{name} must have shape {shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n or self.features.shape[1] < 3:
            raise InvalidArgument("features must be (n, C) with C >= 3")
        if n and (self.scales <= 0).any():
            raise InvalidArgument("scales must be positive")
        if n and ((self.opacity < 0) | (self.opacity > 1)).any():
            raise InvalidArgument("opacity must lie in [0, 1]")

    def select(self, mask) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name)[mask] for f in fields(self)))

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).detach().clone() for f in fields(self)))

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        return GaussianSet(*(torch.cat([getattr(s, f.name) for s in sets]) for f in fields(GaussianSet)))

    @classmethod
    def empty(cls, latent_dim: int = DEFAULT_LATENT_DIM) -> "GaussianSet":
        z = lambda *s: torch.zeros(s, dtype=DTYPE)  # noqa: E731
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, latent_dim))


@dataclass
class UVGaussianSet:
    offsets: Tensor  # (n, 3) triangle-local position, in units of the triangle's mean edge length
    quats: Tensor  # (n, 4) triangle-local rotation
    scales: Tensor  # (n, 3) triangle-local scale
    opacity: Tensor  # (n,)
    features: Tensor  # (n, C)
    face_idx: Tensor  # (n,) long, parent triangle
    bary: Tensor  # (n, 3) anchor on the parent triangle
    texels: Tensor  # (n, 2) long, source texel (column, row)

    def __len__(self) -> int:
        return self.offsets.shape[0]

    def validate(self, num_faces: int | None = None) -> None:
        n = len(self)
        if self.face_idx.shape != (n,) or self.bary.shape != (n, 3) or self.texels.shape != (n, 2):
            raise InvalidArgument("binding arrays do not match the splat count")
        if num_faces is not None and n and int(self.face_idx.max()) >= num_faces:
            raise InvalidArgument("parent triangle index out of range")
        if n and not torch.allclose(self.bary.sum(1), torch.ones(n, dtype=DTYPE), atol=1e-6, rtol=0):
            raise InvalidArgument("anchor barycentrics must sum to 1")
        if n and len({tuple(t) for t in self.texels.tolist()}) != n:
            raise InvalidArgument("at most one splat per texel")
        GaussianSet(self.offsets, self.quats, self.scales, self.opacity, self.features).validate()

    def with_attributes(self, **kw) -> "UVGaussianSet":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kw)
        return UVGaussianSet(**values)

    def detach(self) -> "UVGaussianSet":
        return UVGaussianSet(*(getattr(self, f.name).detach().clone() for f in fields(self)))

    @classmethod
    def empty(cls, latent_dim: int = DEFAULT_LATENT_DIM) -> "UVGaussianSet":
        z = lambda *s: torch.zeros(s, dtype=DTYPE)  # noqa: E731
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, latent_dim), torch.zeros(0, dtype=torch.long), z(0, 3),
                   torch.zeros(0, 2, dtype=torch.long))


# --------------------------------------------------------------------------
# triangle frames
# --------------------------------------------------------------------------


@dataclass
class TriangleFrame:
    rotation: Tensor  # (..., 3, 3), columns [edge0, normal x edge0, normal]
    sigma: Tensor  # (...,) mean edge length
    valid: Tensor | None = None  # (...,) bool, False for degenerate triangles


def triangle_frames(tris) -> TriangleFrame:
    """Frames of ``(..., 3, 3)`` triangles; degenerate ones get identity and ``valid=False``."""
    tris = as_tensor(tris)
    v0, v1, v2 = tris[..., 0, :], tris[..., 1, :], tris[..., 2, :]
    e0, e1, e2 = v1 - v0, v2 - v1, v0 - v2
    sigma = (torch.linalg.norm(e0, dim=-1) + torch.linalg.norm(e1, dim=-1) + torch.linalg.norm(e2, dim=-1)) / 3.0
    n = torch.linalg.cross(e0, v2 - v0)
    area2 = torch.linalg.norm(n, dim=-1)
    e0_len = torch.linalg.norm(e0, dim=-1)
    valid = (area2 > 2 * DEGENERATE_AREA) & (e0_len > 0)
    one = torch.ones_like(area2)
    x = e0 / torch.where(valid, e0_len, one)[..., None]
    z = n / torch.where(valid, area2, one)[..., None]
    y = torch.linalg.cross(z, x)
    R = torch.stack([x, y, z], -1)
    eye = torch.eye(3, dtype=DTYPE).expand(R.shape)
    R = torch.where(valid[..., None, None], R, eye)
    return TriangleFrame(R, sigma, valid)


def triangle_frame(tri) -> TriangleFrame:
    frame = triangle_frames(as_tensor(tri))
    if not bool(frame.valid):
        raise DegenerateTriangleError("triangle has (near) zero area")
    return frame


def rig_to_world(offsets, quats, scales, frame_rot, sigma, anchor):
    """Map triangle-local splats to world: ``r' = R r``, ``mu' = sigma R dmu + t``, ``s' = sigma s``."""
    offsets, frame_rot, sigma, anchor = as_tensor(offsets), as_tensor(frame_rot), as_tensor(sigma), as_tensor(anchor)
    sigma = sigma[..., None]
    means = sigma * (frame_rot @ offsets[..., None])[..., 0] + anchor
    world_quats = quat_multiply(matrix_to_quat(frame_rot), as_tensor(quats))
    return means, quat_normalize(world_quats), sigma * as_tensor(scales)


def world_to_local(means, quats, scales, frame_rot, sigma, anchor):
    """Inverse of :func:`rig_to_world`."""
    means, frame_rot, sigma, anchor = as_tensor(means), as_tensor(frame_rot), as_tensor(sigma), as_tensor(anchor)
    sigma = sigma[..., None]
    Rt = frame_rot.transpose(-1, -2)
    offsets = (Rt @ (means - anchor)[..., None])[..., 0] / sigma
    local_quats = quat_multiply(matrix_to_quat(Rt), as_tensor(quats))
    return offsets, quat_normalize(local_quats), as_tensor(scales) / sigma


# --------------------------------------------------------------------------
# animation
# --------------------------------------------------------------------------


def bind_template_gaussians(posed_vertices, vertex_rotations, canon: GaussianSet) -> GaussianSet:
    """Place template splats on posed vertices, rotated by each vertex's skinning rotation."""
    posed_vertices, vertex_rotations = as_tensor(posed_vertices), as_tensor(vertex_rotations)
    if posed_vertices.shape[0] != len(canon) or vertex_rotations.shape[0] != len(canon):
        raise InvalidArgument(f"{len(canon)} template splats for {posed_vertices.shape[0]} vertices")
    quats = quat_normalize(quat_multiply(matrix_to_quat(vertex_rotations), canon.quats))
    return GaussianSet(posed_vertices, quats, canon.scales, canon.opacity, canon.features)


@dataclass
class AnimatedUV:
    splats: GaussianSet  # active splats only
    active: Tensor  # (n,) bool over the input UV set

    @property
    def inactive(self) -> int:
        return int((~self.active).sum())


def animate_uv_gaussians(posed_vertices, faces, uv_set: UVGaussianSet) -> AnimatedUV:
    posed_vertices, faces = as_tensor(posed_vertices), torch.as_tensor(faces)
    if len(uv_set) and int(uv_set.face_idx.max()) >= faces.shape[0]:
        raise InvalidArgument("UV splat references a triangle outside the mesh")
    tris = posed_vertices[faces[uv_set.face_idx]]  # (n, 3, 3)
    frame = triangle_frames(tris)
    anchor = (uv_set.bary[..., None] * tris).sum(-2)
    means, quats, scales = rig_to_world(uv_set.offsets, uv_set.quats, uv_set.scales, frame.rotation, frame.sigma, anchor)
    world = GaussianSet(means, quats, scales, uv_set.opacity, uv_set.features)
    return AnimatedUV(world.select(frame.valid), frame.valid)


@dataclass
class Avatar:
    template: GaussianSet  # one splat per model vertex (means hold rest positions)
    uv: UVGaussianSet

    def detach(self) -> "Avatar":
        return Avatar(self.template.detach(), self.uv.detach())


@dataclass
class AnimatedAvatar:
    splats: GaussianSet
    inactive: int


def animate_avatar(model, avatar: Avatar, params) -> AnimatedAvatar:
    from .model import evaluate_ehm

    out = evaluate_ehm(model, params)
    parts = []
    if len(avatar.template):
        parts.append(bind_template_gaussians(out.vertices, out.rotations, avatar.template))
    animated = animate_uv_gaussians(out.vertices, model.faces, avatar.uv)
    parts.append(animated.splats)
    return AnimatedAvatar(GaussianSet.concat(parts), animated.inactive)


def make_template_gaussians(rest_vertices, latent_dim: int = DEFAULT_LATENT_DIM, scale: float = 0.01,
                            opacity: float = 0.9, color=(0.5, 0.5, 0.5)) -> GaussianSet:
    rest_vertices = as_tensor(rest_vertices)
    n = rest_vertices.shape[0]
    quats = torch.zeros(n, 4, dtype=DTYPE)
    quats[:, 0] = 1.0
    feats = torch.zeros(n, latent_dim, dtype=DTYPE)
    feats[:, :3] = as_tensor(color)
    return GaussianSet(rest_vertices.clone(), quats, torch.full((n, 3), scale, dtype=DTYPE),
                       torch.full((n,), opacity, dtype=DTYPE), feats)


def make_uv_gaussians(lookup, latent_dim: int = DEFAULT_LATENT_DIM, scale: float = 0.25, opacity: float = 0.9,
                      color=(0.5, 0.5, 0.5)) -> UVGaussianSet:
    """One splat per assigned texel of a :class:`~ehmavatar.uvmap.UVLookup`, sitting on its anchor."""
    rows, cols = torch.nonzero(lookup.face >= 0, as_tuple=True)
    n = rows.shape[0]
    quats = torch.zeros(n, 4, dtype=DTYPE)
    quats[:, 0] = 1.0
    feats = torch.zeros(n, latent_dim, dtype=DTYPE)
    feats[:, :3] = as_tensor(color)
    return UVGaussianSet(
        offsets=torch.zeros(n, 3, dtype=DTYPE), quats=quats, scales=torch.full((n, 3), scale, dtype=DTYPE),
        opacity=torch.full((n,), opacity, dtype=DTYPE), features=feats, face_idx=lookup.face[rows, cols],
        bary=lookup.bary[rows, cols], texels=torch.stack([cols, rows], -1),
    )


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

PLY_PROPERTIES = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("scale_0", "<f4"), ("scale_1", "<f4"), ("scale_2", "<f4"),
    ("opacity", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
]
_PLY_TYPES = {"<f4": "float", "u1": "uchar"}


def write_ply(splats: GaussianSet, path) -> None:
    """Binary little-endian PLY point cloud.

    ``nx, ny, nz`` hold each splat's rotation as an axis-angle vector
    (axis scaled by angle in radians), not a surface normal. Colors are
    latent channels 0-2 clamped to [0, 1] and quantized to 8 bits.
    """
    n = len(splats)
    rec = np.zeros(n, dtype=np.dtype(PLY_PROPERTIES))
    pos = splats.means.detach().numpy()
    rot = quat_to_axis_angle(splats.quats.detach()).numpy() if n else np.zeros((0, 3))
    sc = splats.scales.detach().numpy()
    for i, axis in enumerate("xyz"):
        rec[axis] = pos[:, i]
        rec["n" + axis] = rot[:, i]
        rec[f"scale_{i}"] = sc[:, i]
    rec["opacity"] = splats.opacity.detach().numpy()
    rgb = np.rint(np.clip(splats.features[:, :3].detach().numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    header = ["ply", "format binary_little_endian 1.0",
              "comment nx ny nz store the splat rotation as an axis-angle vector (radians)",
              f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    count = next(int(line.split()[-1]) for line in header if line.startswith("element vertex"))
    return np.frombuffer(data[end:], dtype=np.dtype(PLY_PROPERTIES), count=count)


AVATAR_FORMAT = "ehm-avatar"


def save_avatar(avatar: Avatar, path) -> None:
    from .archive import write_archive

    t, u = avatar.template.detach(), avatar.uv.detach()
    arrays = {
        "template_means": t.means.numpy(), "template_quats": t.quats.numpy(), "template_scales": t.scales.numpy(),
        "template_opacity": t.opacity.numpy(), "template_features": t.features.numpy(),
        "uv_offsets": u.offsets.numpy(), "uv_quats": u.quats.numpy(), "uv_scales": u.scales.numpy(),
        "uv_opacity": u.opacity.numpy(), "uv_features": u.features.numpy(), "uv_face_idx": u.face_idx.numpy(),
        "uv_bary": u.bary.numpy(), "uv_texels": u.texels.numpy(),
    }
    write_archive(path, {"format": AVATAR_FORMAT, "version": 1,
                         "counts": {"template": len(t), "uv": len(u)}}, arrays)


def load_avatar(path) -> Avatar:
    from .archive import read_archive, require

    _, arrays = read_archive(path, AVATAR_FORMAT)

    def f(name):
        return torch.as_tensor(require(arrays, name).astype(np.float64))

    def i(name):
        return torch.as_tensor(require(arrays, name).astype(np.int64))

    template = GaussianSet(f("template_means"), f("template_quats"), f("template_scales"), f("template_opacity"),
                           f("template_features"))
    uv = UVGaussianSet(f("uv_offsets"), f("uv_quats"), f("uv_scales"), f("uv_opacity"), f("uv_features"),
                       i("uv_face_idx"), f("uv_bary"), i("uv_texels"))
    return Avatar(template, uv)
