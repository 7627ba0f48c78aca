"""Mesh visibility rasterizer and a differentiable Gaussian splatting renderer."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .avatar import GaussianSet
from .geometry import DTYPE, MIN_DEPTH, Camera, as_tensor, quat_to_matrix

TRUNCATION_SIGMA = 3.0
MIN_ALPHA = 1.0 / 255.0
SPLAT_NEAR = 0.01  # meters; splats closer than this are skipped
LOWPASS_VARIANCE = 0.3  # px^2 added to every projected covariance


@dataclass
class DepthBuffer:
    depth: np.ndarray  # (H, W) camera-space z, +inf where empty
    face_id: np.ndarray  # (H, W) int, -1 where empty


@dataclass
class Visibility:
    visible: np.ndarray  # (F,) bool
    buffer: DepthBuffer


def rasterize_visibility(posed_vertices, faces, cam: Camera, cull_backfaces: bool = True) -> Visibility:
    """Z-buffer the mesh at pixel centers and report which triangles own at least one pixel.

    Depth is interpolated perspective-correctly (``1/z`` is affine in screen
    space). Equal depths keep the lower triangle index. Triangles with a
    vertex at or behind the camera plane are skipped.
    """
    verts = as_tensor(posed_vertices).detach()
    faces = np.asarray(torch.as_tensor(faces))
    pc = cam.to_camera(verts).numpy()
    z = pc[:, 2]
    safe = np.where(np.abs(z) < MIN_DEPTH, MIN_DEPTH, z)
    px = np.stack([cam.fx * pc[:, 0] / safe + cam.cx, cam.fy * pc[:, 1] / safe + cam.cy], -1)
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    for k, (i0, i1, i2) in enumerate(faces):
        zs = z[[i0, i1, i2]]
        if (zs <= MIN_DEPTH).any():
            continue
        p0, p1, p2 = pc[i0], pc[i1], pc[i2]
        if cull_backfaces and np.dot(np.cross(p1 - p0, p2 - p0), p0) >= 0:
            continue
        tri = px[[i0, i1, i2]]
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-12:
            continue
        x0, y0 = np.maximum(np.ceil(tri.min(0)).astype(np.int64), 0)
        x1 = min(int(np.floor(tri[:, 0].max())), W - 1)
        y1 = min(int(np.floor(tri[:, 1].max())), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx, dy = xs - tri[0, 0], ys - tri[0, 1]
        b1 = (dx * e2[1] - dy * e2[0]) / det
        b2 = (e1[0] * dy - e1[1] * dx) / det
        b0 = 1.0 - b1 - b2
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        zpix = 1.0 / (b0 / zs[0] + b1 / zs[1] + b2 / zs[2])
        yy, xx, zz = ys[inside], xs[inside], zpix[inside]
        closer = zz < depth[yy, xx]
        depth[yy[closer], xx[closer]] = zz[closer]
        face_id[yy[closer], xx[closer]] = k
    visible = np.zeros(len(faces), dtype=bool)
    owners = face_id[face_id >= 0]
    visible[np.unique(owners)] = True
    return Visibility(visible, DepthBuffer(depth, face_id))


# --------------------------------------------------------------------------
# splatting
# --------------------------------------------------------------------------


@dataclass
class RenderTarget:
    features: Tensor  # (H, W, C); channels 0-2 form the coarse RGB image
    alpha: Tensor  # (H, W) accumulated opacity

    @property
    def rgb(self) -> Tensor:
        return self.features[..., :3]


def project_covariances(splats: GaussianSet, cam: Camera):
    """Camera-space depth, 2D means and 2D covariances (EWA local affine approximation)."""
    pc = cam.to_camera(splats.means)
    x, y, z = pc.unbind(-1)
    z_safe = torch.where(z > SPLAT_NEAR, z, torch.ones_like(z))
    R = quat_to_matrix(splats.quats)
    M = R * splats.scales[:, None, :]
    cov_world = M @ M.transpose(-1, -2)
    Wc = cam.rotation
    cov_cam = Wc @ cov_world @ Wc.T
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([cam.fx / z_safe, zero, -cam.fx * x / z_safe**2], -1),
            torch.stack([zero, cam.fy / z_safe, -cam.fy * y / z_safe**2], -1),
        ],
        -2,
    )
    cov2d = J @ cov_cam @ J.transpose(-1, -2) + LOWPASS_VARIANCE * torch.eye(2, dtype=DTYPE)
    means2d = torch.stack([cam.fx * x / z_safe + cam.cx, cam.fy * y / z_safe + cam.cy], -1)
    return z, means2d, cov2d


def splat_gaussians(splats: GaussianSet, cam: Camera, height: int | None = None, width: int | None = None,
                    chunk: int = 64, tile: int = 16) -> RenderTarget:
    """Alpha-composite splats front to back into an ``(H, W, C)`` feature image.

    Each pixel accumulates ``sum_i c_i a_i prod_{j<i} (1 - a_j)`` over
    splats sorted by camera depth, where ``a_i = opacity_i * G_i(x)``.
    Gaussians are cut off beyond 3 standard deviations and contributions
    below 1/255 are dropped. Pixels are processed in square tiles, each
    seeing only the splats whose 3-sigma box overlaps it.
    """
    H = height if height is not None else cam.height
    W = width if width is not None else cam.width
    C = splats.features.shape[1]
    if len(splats) == 0:
        return RenderTarget(torch.zeros(H, W, C, dtype=DTYPE), torch.zeros(H, W, dtype=DTYPE))

    depth, means2d, cov2d = project_covariances(splats, cam)
    keep = depth > SPLAT_NEAR
    order = torch.sort(depth.detach(), stable=True).indices
    order = order[keep[order]]
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    centre = means2d.detach()
    reach = TRUNCATION_SIGMA * torch.sqrt(torch.stack([a, c], -1).detach())
    lo, hi = centre - reach, centre + reach

    cutoff = -0.5 * TRUNCATION_SIGMA**2
    tiles, pixel_ids = [], []
    for ty in range(0, H, tile):
        for tx in range(0, W, tile):
            y1, x1 = min(ty + tile, H), min(tx + tile, W)
            ys, xs = torch.meshgrid(torch.arange(ty, y1), torch.arange(tx, x1), indexing="ij")
            ids = (ys * W + xs).reshape(-1)
            pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], -1).to(DTYPE)
            hit = (hi[order, 0] >= tx) & (lo[order, 0] <= x1 - 1) & (hi[order, 1] >= ty) & (lo[order, 1] <= y1 - 1)
            sel = order[hit]
            image = torch.zeros(ids.shape[0], C, dtype=DTYPE)
            transmittance = torch.ones(ids.shape[0], dtype=DTYPE)
            for start in range(0, sel.shape[0], chunk):
                idx = sel[start:start + chunk]
                d = pix[None, :, :] - means2d[idx][:, None, :]
                q = conic[idx]
                power = -0.5 * (q[:, 0:1] * d[..., 0] ** 2 + 2 * q[:, 1:2] * d[..., 0] * d[..., 1]
                                + q[:, 2:3] * d[..., 1] ** 2)
                inside = power >= cutoff
                g = torch.exp(torch.where(inside, power, torch.full_like(power, cutoff)))
                alpha = splats.opacity[idx][:, None] * g
                alpha = torch.where(inside & (alpha >= MIN_ALPHA), alpha, torch.zeros_like(alpha))
                through = torch.cumprod(1.0 - alpha, 0)
                exclusive = torch.cat([torch.ones_like(through[:1]), through[:-1]], 0)
                weight = transmittance[None] * exclusive * alpha
                image = image + weight.T @ splats.features[idx]
                transmittance = transmittance * through[-1]
            tiles.append(torch.cat([image, (1.0 - transmittance)[:, None]], 1))
            pixel_ids.append(ids)
    flat = torch.cat(tiles)
    inverse = torch.empty(H * W, dtype=torch.long)
    inverse[torch.cat(pixel_ids)] = torch.arange(H * W)
    flat = flat[inverse].reshape(H, W, C + 1)
    return RenderTarget(flat[..., :C], flat[..., C])


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------


def write_png(rgb, path) -> None:
    from PIL import Image

    arr = as_tensor(rgb).detach().numpy()
    img = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB" if img.ndim == 3 else "L").save(path)


def read_image(path) -> Tensor:
    """Load an 8-bit image as ``(H, W, C)`` in [0, 1]; ``.npy`` files are loaded as-is."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        return torch.as_tensor(arr.astype(np.float64) if arr.ndim == 3 else arr[..., None].astype(np.float64))
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(arr)


def write_raw(target: RenderTarget, path) -> None:
    """Dump the full feature target as little-endian float32 plus a JSON header next to it."""
    path = Path(path)
    feats = target.features.detach().numpy().astype("<f4")
    alpha = target.alpha.detach().numpy().astype("<f4")
    H, W, C = feats.shape
    path.write_bytes(np.concatenate([feats.reshape(H * W, C), alpha.reshape(H * W, 1)], 1).tobytes())
    header = {"height": H, "width": W, "channels": C + 1, "dtype": "float32-le", "layout": "row-major HxWx(C+1)",
              "last_channel": "alpha"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
