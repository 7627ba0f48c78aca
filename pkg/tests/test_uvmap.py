import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from ehmavatar.errors import EmptyAtlasError
from ehmavatar.geometry import DTYPE, Camera, project_points
from ehmavatar.model import AvatarParams, evaluate_ehm
from ehmavatar.raster import rasterize_visibility
from ehmavatar.uvmap import (
    build_uv_lookup, inverse_texture_map, sample_vertex_features, uv_to_texel, write_feature_stack,
)


def uv_model(uvs):
    uvs = torch.as_tensor(uvs, dtype=DTYPE)
    faces = torch.arange(uvs.shape[0] * 3).reshape(-1, 3)
    return SimpleNamespace(uvs=uvs, faces=faces)


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def coordinate_field(cam: Camera) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(cam.height, dtype=DTYPE), torch.arange(cam.width, dtype=DTYPE), indexing="ij")
    return torch.stack([xs, ys], -1)


@pytest.fixture(scope="module")
def scene(toy):
    cam = Camera.look_at((0.3, 0.6, 1.5), (0.0, 0.5, 0.0), fx=140, width=128, height=128)
    posed = evaluate_ehm(toy, AvatarParams.zeros(toy), with_rotations=False).vertices
    vis = rasterize_visibility(posed, toy.faces, cam)
    lookup = build_uv_lookup(toy, 64, 64)
    return cam, posed, vis, lookup


# lookup --------------------------------------------------------------------


def test_single_triangle_covering_atlas():
    # a triangle twice the atlas size covers every texel
    lookup = build_uv_lookup(uv_model([[[0, 0], [1, 0], [0, 1]]]), 8, 8)
    m = uv_model([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]])
    both = build_uv_lookup(m, 9, 9)
    assert bool(both.assigned.all())
    assert int((lookup.face == 0).sum()) == 36  # lower-left half incl. the diagonal: 8 + 7 + ... + 1


def test_vertex_texel_is_one_hot():
    lookup = build_uv_lookup(uv_model([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]), 16, 16)
    assert torch.allclose(lookup.bary[0, 0], torch.tensor([1.0, 0, 0], dtype=DTYPE), atol=1e-6)
    assert torch.allclose(lookup.bary[0, 15], torch.tensor([0.0, 1, 0], dtype=DTYPE), atol=1e-6)
    assert torch.allclose(lookup.bary[15, 0], torch.tensor([0.0, 0, 1], dtype=DTYPE), atol=1e-6)


def test_lowest_index_wins_overlap():
    tri = [[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]]
    lookup = build_uv_lookup(uv_model([tri, tri]), 16, 16)
    assert set(lookup.face[lookup.assigned].tolist()) == {0}


def test_coverage_matches_brute_force(toy):
    H = W = 48
    lookup = build_uv_lookup(toy, H, W)
    uvs = toy.uvs.numpy()
    covered = np.zeros((H, W), dtype=bool)
    ys, xs = np.mgrid[0:H, 0:W]
    p = np.stack([xs, ys], -1).astype(np.float64)
    # oracle: same-side edge tests for every texel against every triangle
    for tri in uvs:
        t = uv_to_texel(tri, H, W)
        s = [cross2(t[(k + 1) % 3] - t[k], p - t[k]) for k in range(3)]
        covered |= ((s[0] >= -1e-9) & (s[1] >= -1e-9) & (s[2] >= -1e-9)) | (
            (s[0] <= 1e-9) & (s[1] <= 1e-9) & (s[2] <= 1e-9))
    assert np.array_equal(lookup.assigned.numpy(), covered)


def test_barycentrics_reproduce_texel_position(toy):
    lookup = build_uv_lookup(toy, 40, 40)
    rows, cols = torch.nonzero(lookup.assigned, as_tuple=True)
    tri = torch.as_tensor(uv_to_texel(toy.uvs.numpy(), 40, 40))[lookup.face[rows, cols]]
    pos = (lookup.bary[rows, cols][..., None] * tri).sum(1)
    assert torch.allclose(pos, torch.stack([cols, rows], -1).to(DTYPE), atol=1e-9, rtol=0)


def test_empty_atlas():
    with pytest.raises(EmptyAtlasError):
        build_uv_lookup(uv_model([[[0.1, 0.1], [0.1, 0.1], [0.1, 0.1]]]), 8, 8)


# inverse texture mapping ---------------------------------------------------


def test_constant_field(scene):
    cam, posed, vis, lookup = scene
    v = torch.tensor([0.25, -1.5, 3.0], dtype=DTYPE)
    fuv, stats = inverse_texture_map(v.expand(cam.height, cam.width, 3), posed, lookup, cam, vis.visible)
    written = fuv.abs().sum(-1) > 0
    assert stats.written == int(written.sum()) > 0
    assert torch.equal(fuv[written], v.expand(stats.written, 3))


def test_coordinate_field_matches_projection(scene):
    cam, posed, vis, lookup = scene
    fuv, stats = inverse_texture_map(coordinate_field(cam), posed, lookup, cam, vis.visible)
    rows, cols = torch.nonzero(lookup.assigned, as_tuple=True)
    k = lookup.face[rows, cols]
    visible = torch.as_tensor(vis.visible)[k]
    for r, c, kk, seen in zip(rows.tolist(), cols.tolist(), k.tolist(), visible.tolist()):
        if not seen:
            assert torch.equal(fuv[r, c], torch.zeros(2, dtype=DTYPE))
            continue
        x = lookup.bary[r, c] @ posed[toy_faces(lookup)[kk]]
        uv, _ = project_points(x, cam)
        assert float((fuv[r, c] - uv).abs().max()) < 0.5
    assert stats.visible == int(visible.sum()) and stats.written == stats.visible


def toy_faces(lookup):
    return lookup.faces


def test_invisible_triangles_give_zero(scene):
    cam, posed, vis, lookup = scene
    fuv, stats = inverse_texture_map(coordinate_field(cam) + 1, posed, lookup, cam, np.zeros_like(vis.visible))
    assert torch.equal(fuv, torch.zeros_like(fuv)) and stats.written == 0


def test_behind_camera_counts(toy):
    cam = Camera(100.0, 100.0, 31.5, 31.5, 64, 64, translation=torch.tensor([0.0, 0.0, -5.0]))
    posed = toy.vertices
    lookup = build_uv_lookup(toy, 16, 16)
    fuv, stats = inverse_texture_map(torch.ones(64, 64, 1), posed, lookup, cam, np.ones(toy.num_faces, dtype=bool))
    assert stats.written == 0 and stats.behind_camera == stats.visible
    assert torch.equal(fuv, torch.zeros_like(fuv))


# projection sampling -------------------------------------------------------


def test_vertex_sampling(scene, toy):
    cam, posed, _, _ = scene
    const, front = sample_vertex_features(torch.full((cam.height, cam.width, 2), 0.75), posed, cam)
    assert bool(front.all()) and torch.equal(const, torch.full_like(const, 0.75))
    coords, _ = sample_vertex_features(coordinate_field(cam), posed, cam)
    uv, _ = project_points(posed, cam)
    inside = (uv >= 0).all(1) & (uv[:, 0] <= cam.width - 1) & (uv[:, 1] <= cam.height - 1)
    assert float((coords[inside] - uv[inside]).abs().max()) < 0.5


def test_vertex_on_texel_gets_stored_value():
    cam = Camera(10.0, 10.0, 0.0, 0.0, 8, 8)
    fmap = torch.as_tensor(np.random.default_rng(0).normal(size=(8, 8, 3)), dtype=DTYPE)
    # (0.3, 0.5, 1) projects exactly to pixel (3, 5)
    f, front = sample_vertex_features(fmap, torch.tensor([[0.3, 0.5, 1.0], [0.0, 0.0, -1.0]], dtype=DTYPE), cam)
    assert torch.allclose(f[0], fmap[5, 3], atol=1e-12) and front.tolist() == [True, False]
    assert torch.equal(f[1], torch.zeros(3, dtype=DTYPE))


def test_feature_stack_files(tmp_path):
    fmap = torch.zeros(4, 5, 2, dtype=DTYPE)
    fmap[..., 0] = 2.0
    fmap[1, 2, 1] = 1.0
    sidecar = write_feature_stack(fmap, tmp_path / "stack", ["a", "b"])
    meta = json.loads(sidecar.read_text())
    assert (meta["height"], meta["width"]) == (4, 5)
    assert [c["file"] for c in meta["channels"]] == ["00_a.png", "01_b.png"]
    from PIL import Image

    b = np.asarray(Image.open(tmp_path / "stack" / "01_b.png"))
    assert b[1, 2] == 255 and b.sum() == 255
