import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference
from ehmavatar.errors import BehindCameraError, DegenerateTriangleError, InvalidArgument
from ehmavatar.geometry import (
    DTYPE, Camera, Rotation, axis_angle_to_matrix, axis_angle_to_quat, axis_angle_to_rotation,
    barycentric_of_point, matrix_to_axis_angle, matrix_to_quat, nearest_rotation, project, quat_multiply,
    quat_to_axis_angle, quat_to_matrix, sample_bilinear,
)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3)
quat = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: sum(x * x for x in q) > 1e-2)


def skew(v):
    x, y, z = v
    return torch.tensor([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=DTYPE)


# rotations -----------------------------------------------------------------


def test_zero_rotation_is_identity():
    assert torch.equal(axis_angle_to_matrix(torch.zeros(3)), torch.eye(3, dtype=DTYPE))


def test_quarter_turn_about_z():
    R = axis_angle_to_matrix([0.0, 0.0, math.pi / 2])
    assert torch.allclose(R @ torch.tensor([1.0, 0, 0], dtype=DTYPE), torch.tensor([0.0, 1, 0], dtype=DTYPE),
                          atol=1e-9, rtol=0)


def test_half_turn_about_x():
    R = axis_angle_to_matrix([math.pi, 0.0, 0.0])
    assert torch.allclose(R @ torch.tensor([0.0, 1, 0], dtype=DTYPE), torch.tensor([0.0, -1, 0], dtype=DTYPE),
                          atol=1e-9, rtol=0)


@given(vec3)
def test_rodrigues_matches_matrix_exponential(v):
    # independent oracle: exp of the skew matrix
    expected = torch.linalg.matrix_exp(skew(v))
    assert torch.allclose(axis_angle_to_matrix(v), expected, atol=1e-10, rtol=0)


@given(vec3)
def test_rotation_matrices_are_orthonormal(v):
    R = axis_angle_to_matrix(v)
    assert torch.allclose(R @ R.T, torch.eye(3, dtype=DTYPE), atol=1e-12, rtol=0)
    assert abs(float(torch.linalg.det(R)) - 1.0) < 1e-12


@given(vec3)
def test_quaternion_and_matrix_paths_agree(v):
    assert torch.allclose(quat_to_matrix(axis_angle_to_quat(v)), axis_angle_to_matrix(v), atol=1e-12, rtol=0)


@given(quat)
def test_matrix_quaternion_round_trip(q):
    q = torch.tensor(q, dtype=DTYPE)
    q = q / q.norm()
    back = matrix_to_quat(quat_to_matrix(q))
    # q and -q are the same rotation
    assert min(float((back - q).abs().max()), float((back + q).abs().max())) < 1e-9


@given(vec3.filter(lambda v: 1e-3 < math.sqrt(sum(x * x for x in v)) < math.pi - 1e-3))
def test_axis_angle_round_trip(v):
    assert torch.allclose(matrix_to_axis_angle(axis_angle_to_matrix(v)), torch.tensor(v, dtype=DTYPE),
                          atol=1e-9, rtol=0)


@given(quat, quat)
def test_quaternion_product_is_matrix_product(a, b):
    lhs = quat_to_matrix(quat_multiply(torch.tensor(a), torch.tensor(b)))
    rhs = quat_to_matrix(torch.tensor(a)) @ quat_to_matrix(torch.tensor(b))
    assert torch.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_small_angle_branch_is_continuous():
    v = torch.tensor([3e-7, -2e-7, 1e-7], dtype=DTYPE)
    assert torch.allclose(axis_angle_to_matrix(v), torch.linalg.matrix_exp(skew(v.tolist())), atol=1e-15, rtol=0)
    assert torch.allclose(quat_to_axis_angle(axis_angle_to_quat(v)), v, atol=1e-15, rtol=0)


@pytest.mark.parametrize("v", [[0.3, -0.2, 0.5], [1e-8, 2e-8, -1e-8], [0.0, 0.0, 0.0], [2.0, 1.0, -0.5]])
def test_rodrigues_gradient_matches_central_differences(v):
    x = torch.tensor(v, dtype=DTYPE, requires_grad=True)
    w = torch.arange(9, dtype=DTYPE).reshape(3, 3) / 10.0
    fn = lambda t: (axis_angle_to_matrix(t) * w).sum()  # noqa: E731
    fn(x).backward()
    fd = central_difference(fn, x.detach().clone())
    assert torch.isfinite(x.grad).all()
    assert torch.allclose(x.grad, fd, atol=1e-7, rtol=1e-6)


def test_rotation_class():
    r = Rotation.from_axis_angle([0.0, 0.0, math.pi / 2])
    assert torch.allclose(r.apply([1.0, 0.0, 0.0]), torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE), atol=1e-12)
    assert torch.allclose((r @ r.inverse()).as_matrix(), torch.eye(3, dtype=DTYPE), atol=1e-12)
    assert torch.equal(Rotation.identity().as_matrix(), torch.eye(3, dtype=DTYPE))


def test_axis_angle_validation():
    with pytest.raises(InvalidArgument):
        axis_angle_to_rotation([float("nan"), 0.0, 0.0])
    with pytest.raises(InvalidArgument):
        axis_angle_to_rotation([1.0, 2.0])


def test_nearest_rotation_of_scaled_rotation():
    R = axis_angle_to_matrix([0.4, -0.3, 0.2])
    assert torch.allclose(nearest_rotation(2.5 * R), R, atol=1e-12, rtol=0)


# projection ----------------------------------------------------------------


def test_axis_point_projects_to_principal_point():
    cam = Camera(100.0, 100.0, 64.0, 64.0, 128, 128)
    uv, z = project([0.0, 0.0, 1.0], cam)
    assert uv.tolist() == [64.0, 64.0] and float(z) == 1.0


def test_pinhole_arithmetic():
    cam = Camera(100.0, 100.0, 64.0, 64.0, 128, 128)
    uv, _ = project([1.0, 0.0, 2.0], cam)
    assert torch.allclose(uv, torch.tensor([114.0, 64.0], dtype=DTYPE), atol=1e-12, rtol=0)


def test_point_behind_camera():
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, -1.0], Camera(100.0, 100.0, 64.0, 64.0, 128, 128))


def test_look_at_centres_target():
    cam = Camera.look_at((0.3, 0.5, 2.0), (0.0, 0.2, 0.0), fx=300, width=101, height=81)
    uv, z = project([0.0, 0.2, 0.0], cam)
    assert torch.allclose(uv, torch.tensor([50.0, 40.0], dtype=DTYPE), atol=1e-9, rtol=0)
    assert float(z) > 0
    # image y points down, against world up
    above, _ = project([0.0, 0.4, 0.0], cam)
    assert float(above[1]) < 40.0


def test_camera_dict_round_trip():
    cam = Camera.look_at((0.0, 1.0, 2.0), (0.0, 0.0, 0.0), fx=250.0, width=64, height=48)
    back = Camera.from_dict(cam.to_dict())
    assert torch.equal(back.rotation, cam.rotation) and torch.equal(back.translation, cam.translation)
    assert (back.fx, back.cx, back.width) == (cam.fx, cam.cx, cam.width)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(InvalidArgument):
        Camera(0.0, 1.0, 0.0, 0.0, 8, 8)


# sampling ------------------------------------------------------------------


def test_bilinear_grid_points_and_midpoints():
    fmap = torch.arange(12, dtype=DTYPE).reshape(3, 4, 1)
    assert float(sample_bilinear(fmap, [2.0, 1.0])) == 6.0
    two = torch.tensor([[[0.0], [1.0]]], dtype=DTYPE)
    assert float(sample_bilinear(two, [0.5, 0.0])) == 0.5


def test_bilinear_clamps_to_edge():
    fmap = torch.arange(12, dtype=DTYPE).reshape(3, 4, 1)
    assert float(sample_bilinear(fmap, [-5.0, -5.0])) == float(fmap[0, 0, 0])
    assert float(sample_bilinear(fmap, [50.0, 50.0])) == float(fmap[2, 3, 0])


@given(st.floats(0.0, 6.0), st.floats(0.0, 4.0))
def test_bilinear_matches_brute_force(x, y):
    fmap = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 7, 2)), dtype=DTYPE)
    # oracle: weighted sum over all texels with the tent kernel
    ys, xs = torch.meshgrid(torch.arange(5, dtype=DTYPE), torch.arange(7, dtype=DTYPE), indexing="ij")
    w = (1 - (xs - x).abs()).clamp(min=0) * (1 - (ys - y).abs()).clamp(min=0)
    expected = (w[..., None] * fmap).sum((0, 1))
    assert torch.allclose(sample_bilinear(fmap, [x, y]), expected, atol=1e-12, rtol=0)


def test_bilinear_rejects_nan_and_empty():
    with pytest.raises(InvalidArgument):
        sample_bilinear(torch.zeros(2, 2, 1), [float("nan"), 0.0])
    with pytest.raises(InvalidArgument):
        sample_bilinear(torch.zeros(0, 0, 1), [0.0, 0.0])


# barycentrics --------------------------------------------------------------

TRI = torch.tensor([[0.0, 0.0], [3.0, 0.5], [1.0, 2.0]], dtype=DTYPE)


def test_barycentric_vertex_and_centroid():
    assert torch.allclose(barycentric_of_point(TRI, TRI[0]), torch.tensor([1.0, 0, 0], dtype=DTYPE))
    assert torch.allclose(barycentric_of_point(TRI, TRI.mean(0)), torch.full((3,), 1 / 3, dtype=DTYPE), atol=1e-15)


@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_barycentric_reconstructs_point(a, b):
    if a + b >= 0.99:
        a, b = a / 2, b / 2
    p = (1 - a - b) * TRI[0] + a * TRI[1] + b * TRI[2]
    bary = barycentric_of_point(TRI, p)
    assert torch.allclose(bary @ TRI, p, atol=1e-7, rtol=0)


def test_barycentric_rejects_degenerate():
    with pytest.raises(DegenerateTriangleError):
        barycentric_of_point(torch.tensor([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), [0.5, 0.5])
