"""UV atlas lookup, inverse texture mapping and per-vertex projection sampling.

Feature maps are ``(H, W, C)`` float64 tensors. UV coordinate ``(u, v)``
maps to texel space as ``(u * (W - 1), v * (H - 1))``, so atlas corners
land exactly on texel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import EmptyAtlasError
from .geometry import DTYPE, MIN_DEPTH, Camera, as_tensor, project_points, sample_bilinear_batch

DEFAULT_ATLAS_SIZE = 256


@dataclass(frozen=True, eq=False)
class UVLookup:
    face: Tensor  # (H, W) long, -1 where no triangle covers the texel
    bary: Tensor  # (H, W, 3)
    faces: Tensor  # (F, 3) mesh triangles the face ids refer to

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.face.shape)

    @property
    def assigned(self) -> Tensor:
        return self.face >= 0


def uv_to_texel(uv: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.asarray(uv) * np.array([width - 1, height - 1], dtype=np.float64)


def build_uv_lookup(model, height: int = DEFAULT_ATLAS_SIZE, width: int = DEFAULT_ATLAS_SIZE) -> UVLookup:
    """Rasterize the UV atlas over texel centers; overlapping triangles resolve to the lowest index."""
    uvs = model.uvs.numpy().astype(np.float64)
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    eps = 1e-9
    for k in range(uvs.shape[0]):
        tri = uv_to_texel(uvs[k], height, width)
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) <= 1e-12:
            continue
        x0, y0 = np.maximum(np.floor(tri.min(0)).astype(int), 0)
        x1, y1 = np.minimum(np.ceil(tri.max(0)).astype(int), [width - 1, height - 1])
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx, dy = xs - tri[0, 0], ys - tri[0, 1]
        b1 = (dx * e2[1] - dy * e2[0]) / det
        b2 = (e1[0] * dy - e1[1] * dx) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -eps) & (b1 >= -eps) & (b2 >= -eps) & (face_id[ys, xs] < 0)
        yy, xx = ys[inside], xs[inside]
        face_id[yy, xx] = k
        bary[yy, xx] = np.stack([b0[inside], b1[inside], b2[inside]], -1)
    if not (face_id >= 0).any():
        raise EmptyAtlasError(f"no texel of the {height}x{width} atlas is covered by a UV triangle")
    return UVLookup(torch.as_tensor(face_id), torch.as_tensor(bary), model.faces.clone())


@dataclass
class InverseMapStats:
    assigned: int
    visible: int
    behind_camera: int
    written: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def inverse_texture_map(features, posed_vertices, lookup: UVLookup, cam: Camera,
                        visibility) -> tuple[Tensor, InverseMapStats]:
    """Pull a screen-space feature map into UV space.

    Every assigned texel is lifted onto the posed mesh through its anchor
    barycentrics, projected into the image and bilinearly sampled. Texels
    that are unassigned, on an invisible triangle, or behind the camera are
    zero. Returns ``(F_uv, stats)``.
    """
    features, posed_vertices = as_tensor(features), as_tensor(posed_vertices)
    visibility = torch.as_tensor(visibility, dtype=torch.bool)
    H, W = lookup.shape
    C = features.shape[-1]
    out = torch.zeros(H, W, C, dtype=DTYPE)
    rows, cols = torch.nonzero(lookup.assigned, as_tuple=True)
    k = lookup.face[rows, cols]
    vis = visibility[k]
    tris = posed_vertices[lookup.faces[k]]
    anchor = (lookup.bary[rows, cols][..., None] * tris).sum(-2)
    uv, depth = project_points(anchor, cam)
    in_front = depth > MIN_DEPTH
    keep = vis & in_front
    if keep.any():
        out = out.index_put((rows[keep], cols[keep]), sample_bilinear_batch(features, uv[keep]))
    stats = InverseMapStats(int(rows.shape[0]), int(vis.sum()), int((vis & ~in_front).sum()), int(keep.sum()))
    return out, stats


def sample_vertex_features(features, posed_vertices, cam: Camera) -> tuple[Tensor, Tensor]:
    """Bilinearly sample ``features`` at each projected vertex.

    Returns ``(per_vertex_features, in_front)``; vertices behind the camera
    get zero features and ``in_front=False``.
    """
    features = as_tensor(features)
    uv, depth = project_points(posed_vertices, cam)
    in_front = depth > MIN_DEPTH
    sampled = sample_bilinear_batch(features, uv)
    return torch.where(in_front[:, None], sampled, torch.zeros_like(sampled)), in_front


def write_feature_stack(fmap, out_dir, channel_names: list[str] | None = None, extra: dict | None = None) -> Path:
    """Write one 8-bit grayscale PNG per channel plus ``channels.json``.

    Each channel is linearly rescaled from its own [min, max] (recorded in
    the sidecar) to [0, 255].
    """
    from PIL import Image

    fmap = as_tensor(fmap).detach().numpy()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    C = fmap.shape[-1]
    names = list(channel_names) if channel_names else [f"channel_{c:02d}" for c in range(C)]
    channels = []
    for c in range(C):
        lo, hi = float(fmap[..., c].min()), float(fmap[..., c].max())
        span = hi - lo if hi > lo else 1.0
        img = np.rint((fmap[..., c] - lo) / span * 255.0).astype(np.uint8)
        fname = f"{c:02d}_{names[c]}.png"
        Image.fromarray(img, mode="L").save(out_dir / fname)
        channels.append({"name": names[c], "file": fname, "min": lo, "max": hi})
    sidecar = {"height": fmap.shape[0], "width": fmap.shape[1], "channels": channels}
    if extra:
        sidecar.update(extra)
    path = out_dir / "channels.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
