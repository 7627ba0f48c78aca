"""Expressive template model: body mesh with a swapped-in expressive head.

The head region of the body mesh is replaced by a separately parameterized
face mesh, aligned by the displacement between the eye joints of the two
sub-models, and the composed mesh is posed with linear blend skinning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidArgument, ModelFormatError
from .geometry import DTYPE, Camera, as_tensor, axis_angle_to_matrix, nearest_rotation, project_points

JOINT_GROUPS = ("body", "neck", "jaw", "eye", "hand")


def joint_group(name: str) -> str:
    for prefix, group in (("neck", "neck"), ("jaw", "jaw"), ("eye", "eye"), ("hand", "hand"), ("finger", "hand")):
        if name.startswith(prefix):
            return group
    return "body"


@dataclass(frozen=True, eq=False)
class TemplateModel:
    vertices: Tensor  # (N, 3) body rest mesh
    faces: Tensor  # (F, 3) long
    shape_basis: Tensor  # (N, 3, n_body_shape)
    head_indices: Tensor  # (H,) long, indices into vertices
    face_vertices: Tensor  # (H, 3) face-model rest mesh, ordered like head_indices
    face_shape_basis: Tensor  # (H, 3, n_face_shape)
    expression_basis: Tensor  # (H, 3, n_expression)
    joint_regressor: Tensor  # (K, N)
    face_joint_regressor: Tensor  # (K_face, H)
    body_eye_joints: Tensor  # (E,) long, rows of joint_regressor
    face_eye_joints: Tensor  # (E,) long, rows of face_joint_regressor
    weights: Tensor  # (N, K)
    parents: Tensor  # (K,) long, root = -1
    uvs: Tensor  # (F, 3, 2) per-corner UV in [0, 1]
    landmark_faces: Tensor  # (L,) long
    landmark_bary: Tensor  # (L, 3)
    landmark_labels: tuple[str, ...]
    joint_names: tuple[str, ...]
    _order: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        validate_model(self)
        object.__setattr__(self, "_order", _topological_order(self.parents.tolist()))

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_body_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_face_shape(self) -> int:
        return self.face_shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def joints_in_group(self, group: str) -> list[int]:
        return [k for k, name in enumerate(self.joint_names) if joint_group(name) == group]

    def landmark_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.landmark_labels)}


def _topological_order(parents: list[int]) -> tuple[int, ...]:
    children: dict[int, list[int]] = {}
    for k, p in enumerate(parents):
        children.setdefault(p, []).append(k)
    order, stack = [], list(reversed(children.get(-1, [])))
    while stack:
        k = stack.pop()
        order.append(k)
        stack.extend(reversed(children.get(k, [])))
    return tuple(order)


def validate_model(m: TemplateModel) -> None:
    """Check every model invariant; raise on the first violation naming its section."""
    N = m.vertices.shape[0] if m.vertices.ndim == 2 else -1
    if m.vertices.ndim != 2 or m.vertices.shape[1] != 3 or not torch.isfinite(m.vertices).all():
        raise ModelFormatError("vertices", "expected finite (N, 3) array")
    if m.faces.ndim != 2 or m.faces.shape[1] != 3:
        raise ModelFormatError("faces", "expected (F, 3) array")
    if m.faces.numel() and (int(m.faces.min()) < 0 or int(m.faces.max()) >= N):
        raise ModelFormatError("faces", "face index out of range")
    if m.shape_basis.ndim != 3 or m.shape_basis.shape[:2] != (N, 3):
        raise ModelFormatError("shape_basis", "expected (N, 3, n) array")
    H = m.head_indices.shape[0]
    if m.head_indices.ndim != 1 or H == 0 or int(m.head_indices.min()) < 0 or int(m.head_indices.max()) >= N:
        raise ModelFormatError("head_indices", "expected non-empty vertex indices")
    if len(set(m.head_indices.tolist())) != H:
        raise ModelFormatError("head_indices", "duplicate head vertex")
    if m.face_vertices.shape != (H, 3):
        raise ModelFormatError("face_vertices", "expected (H, 3) array")
    for name in ("face_shape_basis", "expression_basis"):
        b = getattr(m, name)
        if b.ndim != 3 or b.shape[:2] != (H, 3):
            raise ModelFormatError(name, "expected (H, 3, n) array")
    K = m.parents.shape[0]
    if m.joint_regressor.shape != (K, N):
        raise ModelFormatError("joint_regressor", f"expected ({K}, {N}) matrix")
    if not torch.allclose(m.joint_regressor.sum(1), torch.ones(K, dtype=DTYPE), atol=1e-6, rtol=0):
        raise ModelFormatError("joint_regressor", "rows must sum to 1")
    if m.face_joint_regressor.ndim != 2 or m.face_joint_regressor.shape[1] != H:
        raise ModelFormatError("face_joint_regressor", "expected (K_face, H) matrix")
    kf = m.face_joint_regressor.shape[0]
    if not torch.allclose(m.face_joint_regressor.sum(1), torch.ones(kf, dtype=DTYPE), atol=1e-6, rtol=0):
        raise ModelFormatError("face_joint_regressor", "rows must sum to 1")
    E = m.body_eye_joints.shape[0]
    if E == 0 or m.face_eye_joints.shape[0] != E:
        raise ModelFormatError("eye_joints", "need matching, non-empty eye joint lists")
    if int(m.body_eye_joints.max()) >= K or int(m.body_eye_joints.min()) < 0:
        raise ModelFormatError("eye_joints", "body eye joint out of range")
    if int(m.face_eye_joints.max()) >= kf or int(m.face_eye_joints.min()) < 0:
        raise ModelFormatError("eye_joints", "face eye joint out of range")
    if m.weights.shape != (N, K):
        raise ModelFormatError("weights", f"expected ({N}, {K}) matrix")
    if (m.weights < 0).any() or not torch.allclose(m.weights.sum(1), torch.ones(N, dtype=DTYPE), atol=1e-6, rtol=0):
        raise ModelFormatError("weights", "rows must be non-negative and sum to 1")
    _check_tree(m.parents.tolist())
    F = m.faces.shape[0]
    if m.uvs.shape != (F, 3, 2) or (m.uvs < 0).any() or (m.uvs > 1).any():
        raise ModelFormatError("uvs", "expected (F, 3, 2) coordinates in [0, 1]")
    L = m.landmark_faces.shape[0]
    if m.landmark_bary.shape != (L, 3) or len(m.landmark_labels) != L:
        raise ModelFormatError("landmarks", "inconsistent landmark table")
    if L and (int(m.landmark_faces.min()) < 0 or int(m.landmark_faces.max()) >= F):
        raise ModelFormatError("landmarks", "landmark face index out of range")
    if L and not torch.allclose(m.landmark_bary.sum(1), torch.ones(L, dtype=DTYPE), atol=1e-6, rtol=0):
        raise ModelFormatError("landmarks", "barycentric rows must sum to 1")
    if len(set(m.landmark_labels)) != L:
        raise ModelFormatError("landmarks", "duplicate landmark label")
    if len(m.joint_names) != K:
        raise ModelFormatError("joint_names", "one name per joint required")


def _check_tree(parents: list[int]) -> None:
    K = len(parents)
    if sum(p == -1 for p in parents) != 1:
        raise ModelFormatError("parents", "kinematic tree needs exactly one root")
    for k, p in enumerate(parents):
        if p != -1 and not 0 <= p < K:
            raise ModelFormatError("parents", f"joint {k} has invalid parent {p}")
    for k in range(K):
        seen, j = set(), k
        while j != -1:
            if j in seen:
                raise ModelFormatError("parents", f"cycle through joint {k}")
            seen.add(j)
            j = parents[j]


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class AvatarParams:
    """Per-frame model parameters; pose is one axis-angle row per joint."""

    betas_body: Tensor
    betas_face: Tensor
    expression: Tensor
    pose: Tensor  # (K, 3)
    joint_offsets: Tensor  # (K, 3)
    global_rot: Tensor  # (3,) axis-angle
    global_trans: Tensor  # (3,)

    @classmethod
    def zeros(cls, model: TemplateModel) -> "AvatarParams":
        K = model.num_joints
        z = lambda *s: torch.zeros(s, dtype=DTYPE)  # noqa: E731
        return cls(z(model.n_body_shape), z(model.n_face_shape), z(model.n_expression), z(K, 3), z(K, 3), z(3), z(3))

    def validate(self, model: TemplateModel) -> None:
        expected = {
            "betas_body": (model.n_body_shape,), "betas_face": (model.n_face_shape,),
            "expression": (model.n_expression,), "pose": (model.num_joints, 3),
            "joint_offsets": (model.num_joints, 3), "global_rot": (3,), "global_trans": (3,),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if tuple(value.shape) != shape:
                raise InvalidArgument(f"{name} has shape {tuple(value.shape)}, model expects {shape}")
            if not torch.isfinite(value).all():
                raise InvalidArgument(f"{name} must be finite")

    def global_matrix(self) -> Tensor:
        return axis_angle_to_matrix(self.global_rot)

    def detach(self) -> "AvatarParams":
        return AvatarParams(**{f.name: getattr(self, f.name).detach().clone() for f in fields(self)})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).detach().tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict, model: TemplateModel | None = None) -> "AvatarParams":
        base = cls.zeros(model) if model is not None else None
        values = {}
        for f in fields(cls):
            if f.name in d:
                values[f.name] = as_tensor(d[f.name])
            elif base is not None:
                values[f.name] = getattr(base, f.name)
            else:
                raise InvalidArgument(f"missing parameter {f.name}")
        params = cls(**values)
        if model is not None:
            params.validate(model)
        return params

    def with_global(self, rot_matrix: Tensor, trans: Tensor) -> "AvatarParams":
        """Left-compose an extra rigid transform onto the global one."""
        from .geometry import matrix_to_axis_angle

        R = as_tensor(rot_matrix) @ self.global_matrix()
        return replace(self, global_rot=matrix_to_axis_angle(R), global_trans=as_tensor(rot_matrix) @ self.global_trans + as_tensor(trans))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def eye_displacement(model: TemplateModel, betas_body, betas_face) -> Tensor:
    """Offset that moves the shaped face model's eye joints onto the body model's eye joints."""
    body = model.vertices + model.shape_basis @ as_tensor(betas_body)
    face = model.face_vertices + model.face_shape_basis @ as_tensor(betas_face)
    body_eyes = (model.joint_regressor[model.body_eye_joints] @ body).mean(0)
    face_eyes = (model.face_joint_regressor[model.face_eye_joints] @ face).mean(0)
    return body_eyes - face_eyes


def compose_rest_mesh(model: TemplateModel, params: AvatarParams) -> Tensor:
    params.validate(model)
    body = model.vertices + model.shape_basis @ params.betas_body
    head = (
        model.face_vertices
        + model.face_shape_basis @ params.betas_face
        + model.expression_basis @ params.expression
        + eye_displacement(model, params.betas_body, params.betas_face)
    )
    return body.index_put((model.head_indices,), head)


def regress_joints(model: TemplateModel, rest_mesh, joint_offsets=None) -> Tensor:
    rest_mesh = as_tensor(rest_mesh)
    if rest_mesh.shape != (model.num_vertices, 3):
        raise InvalidArgument(f"mesh has shape {tuple(rest_mesh.shape)}, expected ({model.num_vertices}, 3)")
    joints = model.joint_regressor @ rest_mesh
    if joint_offsets is not None:
        joint_offsets = as_tensor(joint_offsets)
        if joint_offsets.shape != joints.shape:
            raise InvalidArgument("joint offsets must be (K, 3)")
        joints = joints + joint_offsets
    return joints


@dataclass
class SkinningResult:
    vertices: Tensor  # (N, 3) posed, world space
    rotations: Tensor | None  # (N, 3, 3) blended skinning rotation, projected to SO(3)
    joints: Tensor  # (K, 3) posed joint positions
    joint_rotations: Tensor  # (K, 3, 3) world rotation of each joint
    joint_translations: Tensor  # (K, 3) translation of each joint's rest->posed transform


def lbs(model: TemplateModel, rest_mesh, joints, pose, global_rot=None, global_trans=None,
        with_rotations: bool = True) -> SkinningResult:
    """Linear blend skinning of ``rest_mesh``.

    Each joint's rest->posed transform is ``x -> A_k x + a_k``. Vertices are
    blended as ``v + sum_k w_k ((A_k - I) v + a_k)`` so that the rest pose
    reproduces its input exactly. ``global_rot`` (3x3 matrix) and
    ``global_trans`` are applied after skinning.
    """
    rest_mesh, joints, pose = as_tensor(rest_mesh), as_tensor(joints), as_tensor(pose)
    K = model.num_joints
    if pose.shape != (K, 3) or joints.shape != (K, 3):
        raise InvalidArgument("pose and joints must be (K, 3)")
    if rest_mesh.shape != (model.num_vertices, 3):
        raise InvalidArgument("rest mesh does not match the model")
    local = axis_angle_to_matrix(pose)
    parents = model.parents.tolist()
    rots: list[Tensor | None] = [None] * K
    trans: list[Tensor | None] = [None] * K
    for k in model._order:
        # rotation about the rest joint: x -> R (x - J) + J
        t_local = joints[k] - local[k] @ joints[k]
        p = parents[k]
        if p == -1:
            rots[k], trans[k] = local[k], t_local
        else:
            rots[k] = rots[p] @ local[k]
            trans[k] = rots[p] @ t_local + trans[p]
    A = torch.stack(rots)
    a = torch.stack(trans)
    eye = torch.eye(3, dtype=DTYPE)
    W = model.weights
    delta = torch.einsum("nk,kij->nij", W, A - eye)
    verts = rest_mesh + (delta @ rest_mesh[..., None])[..., 0] + W @ a
    posed_joints = (A @ joints[..., None])[..., 0] + a
    blended = None
    if with_rotations:
        blended = nearest_rotation(eye + delta)
    if global_rot is not None:
        G = as_tensor(global_rot)
        verts = verts @ G.T
        posed_joints = posed_joints @ G.T
        A = G @ A
        a = a @ G.T
        if blended is not None:
            blended = G @ blended
    if global_trans is not None:
        T = as_tensor(global_trans)
        verts = verts + T
        posed_joints = posed_joints + T
        a = a + T
    return SkinningResult(verts, blended, posed_joints, A, a)


@dataclass
class EHMOutput:
    vertices: Tensor
    rotations: Tensor | None
    joints: Tensor
    rest_vertices: Tensor
    rest_joints: Tensor
    landmarks3d: Tensor
    landmarks2d: Tensor | None = None
    landmark_depth: Tensor | None = None


def interpolate_on_faces(vertices: Tensor, faces: Tensor, face_idx: Tensor, bary: Tensor) -> Tensor:
    tri = vertices[faces[face_idx]]  # (L, 3, 3)
    return (as_tensor(bary)[..., None] * tri).sum(-2)


def evaluate_ehm(model: TemplateModel, params: AvatarParams, cam: Camera | None = None,
                 with_rotations: bool = True) -> EHMOutput:
    rest = compose_rest_mesh(model, params)
    rest_joints = regress_joints(model, rest, params.joint_offsets)
    sk = lbs(model, rest, rest_joints, params.pose, params.global_matrix(), params.global_trans,
             with_rotations=with_rotations)
    lm3d = interpolate_on_faces(sk.vertices, model.faces, model.landmark_faces, model.landmark_bary)
    out = EHMOutput(sk.vertices, sk.rotations, sk.joints, rest, rest_joints, lm3d)
    if cam is not None:
        out.landmarks2d, out.landmark_depth = project_points(lm3d, cam)
    return out


def stack_params(params: list[AvatarParams]) -> AvatarParams:
    """Stack per-frame parameters along a new leading frame axis."""
    return AvatarParams(**{f.name: torch.stack([getattr(p, f.name) for p in params]) for f in fields(AvatarParams)})


def evaluate_ehm_frames(model: TemplateModel, stacked: AvatarParams, cams: list[Camera] | None = None) -> EHMOutput:
    """Vectorized :func:`evaluate_ehm` over a leading frame axis, without skinning rotations.

    ``stacked`` holds ``(B, ...)`` tensors (see :func:`stack_params`); each
    camera in ``cams`` projects the matching frame. Results match the
    per-frame evaluation up to floating-point reassociation.
    """
    bb, bf, ex = stacked.betas_body, stacked.betas_face, stacked.expression
    B = bb.shape[0]
    body = model.vertices + torch.einsum("vcn,bn->bvc", model.shape_basis, bb)
    face = model.face_vertices + torch.einsum("vcn,bn->bvc", model.face_shape_basis, bf)
    body_eyes = (model.joint_regressor[model.body_eye_joints] @ body).mean(1)
    face_eyes = (model.face_joint_regressor[model.face_eye_joints] @ face).mean(1)
    head = face + torch.einsum("vcn,bn->bvc", model.expression_basis, ex) + (body_eyes - face_eyes)[:, None]
    rest = body.index_put((torch.arange(B)[:, None], model.head_indices[None]), head)
    joints = model.joint_regressor @ rest + stacked.joint_offsets

    local = axis_angle_to_matrix(stacked.pose)  # (B, K, 3, 3)
    t_local = joints - (local @ joints[..., None])[..., 0]
    parents = model.parents.tolist()
    rots: list[Tensor | None] = [None] * model.num_joints
    trans: list[Tensor | None] = [None] * model.num_joints
    for k in model._order:
        p = parents[k]
        if p == -1:
            rots[k], trans[k] = local[:, k], t_local[:, k]
        else:
            rots[k] = rots[p] @ local[:, k]
            trans[k] = (rots[p] @ t_local[:, k, :, None])[..., 0] + trans[p]
    A = torch.stack(rots, 1)
    a = torch.stack(trans, 1)
    delta = torch.einsum("nk,bkij->bnij", model.weights, A - torch.eye(3, dtype=DTYPE))
    verts = rest + (delta @ rest[..., None])[..., 0] + model.weights @ a
    posed_joints = (A @ joints[..., None])[..., 0] + a
    G = axis_angle_to_matrix(stacked.global_rot)
    T = stacked.global_trans[:, None]
    verts = verts @ G.transpose(-1, -2) + T
    posed_joints = posed_joints @ G.transpose(-1, -2) + T
    tri = verts[:, model.faces[model.landmark_faces]]  # (B, L, 3, 3)
    lm3d = (model.landmark_bary[..., None] * tri).sum(-2)
    out = EHMOutput(verts, None, posed_joints, rest, joints, lm3d)
    if cams is not None:
        if len(cams) != B:
            raise InvalidArgument("one camera per frame required")
        uv, z = zip(*(project_points(lm3d[b], cam) for b, cam in enumerate(cams)))
        out.landmarks2d, out.landmark_depth = torch.stack(uv), torch.stack(z)
    return out


# --------------------------------------------------------------------------
# synthetic model
# --------------------------------------------------------------------------

_JOINT_LAYOUT = {
    # name: (target position, axis joint?)
    "root": ((0.0, 0.10, 0.0), True),
    "neck": ((0.0, 0.72, 0.0), True),
    "jaw": ((0.0, 0.79, 0.06), False),
    "eye_l": ((0.04, 0.88, 0.07), False),
    "eye_r": ((-0.04, 0.88, 0.07), False),
    "spine": ((0.0, 0.45, 0.0), True),
    "arm_l": ((0.14, 0.62, 0.0), False),
    "hand_l": ((0.14, 0.32, 0.02), False),
    "arm_r": ((-0.14, 0.62, 0.0), False),
    "hand_r": ((-0.14, 0.32, 0.02), False),
}
HEAD_START = 0.74
MIN_TOY_VERTICES = 12
MIN_TOY_JOINTS = 4


def _radius(y: float) -> float:
    if y < 0.64:
        return 0.15
    if y < 0.72:
        return 0.15 - (0.08 * (y - 0.64) / 0.08)
    if y < 0.77:
        return 0.07 + 0.03 * (y - 0.72) / 0.05
    return 0.10 * (1.0 - 0.5 * max(0.0, (y - 0.9) / 0.1) ** 2)


def _toy_joint_names(K: int) -> list[str]:
    names = list(_JOINT_LAYOUT)[:K]
    fingers = K - len(names)
    for i in range(fingers):
        side = "l" if i % 2 == 0 else "r"
        names.append(f"finger_{side}_{i // 2}")
    return names


def _toy_parents(names: list[str]) -> list[int]:
    idx = {n: i for i, n in enumerate(names)}
    parents = []
    for n in names:
        if n == "root":
            p = None
        elif n in ("spine",):
            p = "root"
        elif n == "neck":
            p = "spine" if "spine" in idx else "root"
        elif n in ("jaw", "eye_l", "eye_r"):
            p = "neck"
        elif n.startswith("arm"):
            p = "spine"
        elif n.startswith("hand"):
            p = "arm" + n[4:]
        else:  # finger_<side>_<i>
            _, side, i = n.split("_")
            i = int(i)
            p = f"finger_{side}_{i - 1}" if i > 0 else f"hand_{side}"
            if p not in idx:
                p = "root"
        parents.append(-1 if p is None else idx[p])
    return parents


def _finger_target(name: str, names: list[str], targets: dict) -> tuple[float, float, float]:
    _, side, i = name.split("_")
    sx = 1.0 if side == "l" else -1.0
    return (0.14 * sx, 0.26 - 0.05 * int(i), 0.03)


def _zipper(ring: list[int], ring_ang: list[float], cap: list[int], cap_ang: list[float]) -> list[tuple[int, int, int]]:
    tris = []
    i = j = 0
    s, r = len(ring), len(cap)
    while i < s or j < r:
        ai = ring_ang[(i + 1) % s] + (2 * math.pi if i + 1 >= s else 0.0)
        aj = cap_ang[(j + 1) % r] + (2 * math.pi if j + 1 >= r else 0.0)
        if j >= r or (i < s and ai <= aj):
            tris.append((ring[i % s], ring[(i + 1) % s], cap[j % r]))
            i += 1
        else:
            tris.append((ring[i % s], cap[(j + 1) % r], cap[j % r]))
            j += 1
    return tris


def make_toy_model(seed: int = 0, N: int = 400, K: int = 12, n_body_shape: int = 8, n_face_shape: int = 8,
                   n_expression: int = 8) -> TemplateModel:
    """Deterministic synthetic model: a 1 m tall tube with a head region on top.

    All arrays are rounded to float32 precision so the model survives a
    save/load round trip bit-exactly.
    """
    if N < MIN_TOY_VERTICES:
        raise InvalidArgument(f"toy model needs at least {MIN_TOY_VERTICES} vertices, got {N}")
    if K < MIN_TOY_JOINTS:
        raise InvalidArgument(f"toy model needs at least {MIN_TOY_JOINTS} joints, got {K}")
    rng = np.random.default_rng(seed)

    seg = int(min(max(round(math.sqrt(N / 2)), 4), 32))
    rings = N // seg
    if rings < 3:
        seg, rings = N // 3, 3
    leftover = N - rings * seg
    top_y = 0.96 if leftover else 1.0

    verts, ring_ids = [], []
    ring_y = np.linspace(0.0, top_y, rings)
    for k, y in enumerate(ring_y):
        r = _radius(float(y))
        ids = []
        for a in range(seg):
            phi = 2 * math.pi * a / seg
            ids.append(len(verts))
            verts.append((r * math.sin(phi), float(y), r * math.cos(phi)))
        ring_ids.append(ids)
    cap_ids, cap_ang = [], []
    for c in range(leftover):
        phi = 2 * math.pi * (c + 0.5) / leftover
        rc = 0.0 if leftover == 1 else 0.04
        cap_ids.append(len(verts))
        cap_ang.append(phi)
        verts.append((rc * math.sin(phi), 1.0, rc * math.cos(phi)))
    V = np.asarray(verts)

    faces, uvs = [], []
    v_of = lambda k: 0.8 * k / (rings - 1)  # noqa: E731
    for k in range(rings - 1):
        for a in range(seg):
            A, B = ring_ids[k][a], ring_ids[k][(a + 1) % seg]
            C, D = ring_ids[k + 1][(a + 1) % seg], ring_ids[k + 1][a]
            ua, ub = a / seg, (a + 1) / seg
            faces += [(A, B, C), (A, C, D)]
            uvs += [[(ua, v_of(k)), (ub, v_of(k)), (ub, v_of(k + 1))],
                    [(ua, v_of(k)), (ub, v_of(k + 1)), (ua, v_of(k + 1))]]
    if leftover:
        top = ring_ids[-1]
        top_ang = [2 * math.pi * a / seg for a in range(seg)]
        if leftover == 1:
            cap_tris = [(top[a], top[(a + 1) % seg], cap_ids[0]) for a in range(seg)]
        else:
            cap_tris = _zipper(top, top_ang, cap_ids, cap_ang)
        ang_of = {i: a for i, a in zip(top, top_ang)}
        ang_of.update(zip(cap_ids, cap_ang))
        for tri in cap_tris:
            n = np.cross(V[tri[1]] - V[tri[0]], V[tri[2]] - V[tri[0]])
            if n[1] < 0:
                tri = (tri[0], tri[2], tri[1])
            faces.append(tri)
            corner = []
            for vid in tri:
                rad = 0.08 if vid in ang_of and vid not in cap_ids else (0.0 if leftover == 1 else 0.035)
                ang = ang_of[vid]
                corner.append((0.5 + rad * math.sin(ang), 0.9 + rad * math.cos(ang)))
            uvs.append(corner)
    faces = np.asarray(faces, dtype=np.int64)
    uvs = np.clip(np.asarray(uvs), 0.0, 1.0)

    head = np.nonzero(V[:, 1] >= HEAD_START)[0]
    if head.size == 0:
        head = np.asarray(ring_ids[-1] + cap_ids)
    Hn = head.size

    names = _toy_joint_names(K)
    parents = _toy_parents(names)
    targets = {}
    for n in names:
        targets[n] = np.asarray(_JOINT_LAYOUT[n][0] if n in _JOINT_LAYOUT else _finger_target(n, names, targets))

    J_reg = np.zeros((K, N))
    head_pos = {int(h): i for i, h in enumerate(head)}
    for k, n in enumerate(names):
        t = targets[n]
        axis = n in _JOINT_LAYOUT and _JOINT_LAYOUT[n][1]
        if axis:
            ring = int(np.argmin(np.abs(ring_y - t[1])))
            J_reg[k, ring_ids[ring]] = 1.0 / seg
        else:
            pool = head if n.startswith(("eye", "jaw")) else np.arange(N)
            d = np.linalg.norm(V[pool] - t, axis=1)
            near = pool[np.argsort(d, kind="stable")[: min(6, pool.size)]]
            w = 1.0 / (np.linalg.norm(V[near] - t, axis=1) + 1e-3)
            J_reg[k, near] = w / w.sum()
    joints = J_reg @ V

    taus = np.array([0.03 if n.startswith(("eye", "jaw")) else 0.05 if n.startswith(("hand", "finger")) else 0.09
                     for n in names])
    d2 = ((V[:, None, :] - joints[None]) ** 2).sum(-1)
    logits = -d2 / (2 * taus**2)
    # jaw and eye joints only influence the head; the head only follows neck, jaw and eyes
    is_head = np.zeros(N, dtype=bool)
    is_head[head] = True
    for k, n in enumerate(names):
        if n.startswith(("eye", "jaw")):
            logits[~is_head, k] = -np.inf
        elif not n.startswith("neck"):
            logits[is_head, k] = -np.inf
    logits -= logits.max(1, keepdims=True)
    W = np.exp(logits)
    W /= W.sum(1, keepdims=True)

    def basis(rows: int, n: int, scale: float) -> np.ndarray:
        raw = rng.standard_normal((rows * 3, n))
        q, _ = np.linalg.qr(raw)
        return (q * scale * math.sqrt(rows * 3) / math.sqrt(3)).reshape(rows, 3, n)

    B_b = basis(N, n_body_shape, 0.01)
    face_V = V[head] + np.array([0.0, 0.015, -0.01]) + 0.002 * rng.standard_normal((Hn, 3))
    B_f = basis(Hn, n_face_shape, 0.006)
    B_psi = basis(Hn, n_expression, 0.006)

    eye_names = [k for k, n in enumerate(names) if n.startswith("eye")]
    Jf = J_reg[eye_names][:, head]
    Jf = Jf / Jf.sum(1, keepdims=True)

    labels, lm_faces = [], []
    centroids = V[faces].mean(1)
    normals = np.cross(V[faces[:, 1]] - V[faces[:, 0]], V[faces[:, 2]] - V[faces[:, 0]])
    head_face = np.all(np.isin(faces, head), axis=1)
    front = normals[:, 2] > 0

    def nearest_faces(target, mask, count):
        cand = np.nonzero(mask)[0]
        if cand.size == 0:
            return []
        d = np.linalg.norm(centroids[cand] - target, axis=1)
        return [int(c) for c in cand[np.argsort(d, kind="stable")[:count]]]

    used: set[int] = set()

    def add(prefix, target, mask, count):
        for i, f in enumerate(x for x in nearest_faces(target, mask, count + len(used)) if x not in used):
            if i >= count:
                break
            used.add(f)
            labels.append(f"{prefix}_{i}")
            lm_faces.append(f)

    if eye_names:
        for n in names:
            if n.startswith("eye"):
                add(n, targets[n] + np.array([0.0, 0.0, 0.03]), head_face & front, 2)
    if "jaw" in names:
        add("mouth", targets["jaw"] + np.array([0.0, -0.01, 0.05]), head_face, 4)
    # generic face landmarks stay off eye-driven triangles so that only eye landmarks see the eye pose
    eye_weight = W[:, eye_names].sum(1)[faces].max(1) if eye_names else np.zeros(len(faces))
    head_candidates = [f for f in np.nonzero(head_face & (eye_weight < 1e-3))[0] if f not in used]
    stride = max(1, len(head_candidates) // 16)
    for i, f in enumerate(head_candidates[::stride][:16]):
        used.add(int(f))
        labels.append(f"face_{i:02d}")
        lm_faces.append(int(f))
    body_candidates = [f for f in np.nonzero(~head_face)[0] if f not in used]
    for n in names:
        if n.startswith(("hand", "finger")):
            add(n, targets[n], ~head_face, 1)
    body_candidates = [f for f in np.nonzero(~head_face)[0] if f not in used]
    stride = max(1, len(body_candidates) // 14)
    for i, f in enumerate(body_candidates[::stride][:14]):
        labels.append(f"body_{i:02d}")
        lm_faces.append(int(f))
    bary = rng.uniform(0.2, 1.0, size=(len(lm_faces), 3))
    bary /= bary.sum(1, keepdims=True)

    def f32(a):
        return torch.as_tensor(np.asarray(a, dtype=np.float32), dtype=DTYPE)

    return TemplateModel(
        vertices=f32(V), faces=torch.as_tensor(faces), shape_basis=f32(B_b), head_indices=torch.as_tensor(head),
        face_vertices=f32(face_V), face_shape_basis=f32(B_f), expression_basis=f32(B_psi),
        joint_regressor=f32(J_reg), face_joint_regressor=f32(Jf),
        body_eye_joints=torch.as_tensor(eye_names, dtype=torch.long),
        face_eye_joints=torch.arange(len(eye_names), dtype=torch.long),
        weights=f32(W), parents=torch.as_tensor(parents, dtype=torch.long), uvs=f32(uvs),
        landmark_faces=torch.as_tensor(lm_faces, dtype=torch.long), landmark_bary=f32(bary),
        landmark_labels=tuple(labels), joint_names=tuple(names),
    )


# --------------------------------------------------------------------------
# model file
# --------------------------------------------------------------------------

MODEL_FORMAT = "ehm-template"


def _triplets(dense: Tensor):
    rows, cols = torch.nonzero(dense, as_tuple=True)
    return rows.numpy(), cols.numpy(), dense[rows, cols].numpy()


def save_model(model: TemplateModel, path) -> None:
    from .archive import write_archive

    manifest = {
        "format": MODEL_FORMAT,
        "version": 1,
        "counts": {"vertices": model.num_vertices, "faces": model.num_faces, "joints": model.num_joints,
                   "head_vertices": int(model.head_indices.shape[0]),
                   "face_joints": int(model.face_joint_regressor.shape[0]),
                   "landmarks": len(model.landmark_labels)},
        "basis_ranks": {"body_shape": model.n_body_shape, "face_shape": model.n_face_shape,
                        "expression": model.n_expression},
        "landmark_labels": list(model.landmark_labels),
        "joint_names": list(model.joint_names),
        "eye_joints": {"body": model.body_eye_joints.tolist(), "face": model.face_eye_joints.tolist()},
    }
    jr, jc, jv = _triplets(model.joint_regressor)
    fr, fc, fv = _triplets(model.face_joint_regressor)
    arrays = {
        "vertices": model.vertices.numpy(),
        "faces": model.faces.numpy(),
        "shape_basis": model.shape_basis.numpy(),
        "head_indices": model.head_indices.numpy(),
        "face_vertices": model.face_vertices.numpy(),
        "face_shape_basis": model.face_shape_basis.numpy(),
        "expression_basis": model.expression_basis.numpy(),
        "joint_regressor_rows": jr, "joint_regressor_cols": jc, "joint_regressor_values": jv,
        "face_joint_regressor_rows": fr, "face_joint_regressor_cols": fc, "face_joint_regressor_values": fv,
        "weights": model.weights.numpy(),
        "parents": model.parents.numpy(),
        "uvs": model.uvs.numpy(),
        "landmark_faces": model.landmark_faces.numpy(),
        "landmark_bary": model.landmark_bary.numpy(),
    }
    write_archive(path, manifest, arrays)


def load_model(path) -> TemplateModel:
    """Load and validate a model archive; errors name the offending section."""
    from .archive import read_archive, require

    manifest, arrays = read_archive(path, MODEL_FORMAT)
    try:
        counts = manifest["counts"]
        N, K, kf = int(counts["vertices"]), int(counts["joints"]), int(counts["face_joints"])
        H = int(counts["head_vertices"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError("manifest", f"bad counts: {exc}") from exc

    def sparse(prefix: str, shape: tuple[int, int]) -> Tensor:
        rows = require(arrays, f"{prefix}_rows", 1)
        cols = require(arrays, f"{prefix}_cols", 1)
        vals = require(arrays, f"{prefix}_values", 1)
        if not (rows.shape == cols.shape == vals.shape):
            raise ModelFormatError(prefix, "triplet arrays differ in length")
        if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
            raise ModelFormatError(prefix, "triplet index out of range")
        dense = torch.zeros(shape, dtype=DTYPE)
        dense[torch.as_tensor(rows.astype(np.int64)), torch.as_tensor(cols.astype(np.int64))] = torch.as_tensor(
            vals.astype(np.float64))
        return dense

    def f(name, ndim):
        return torch.as_tensor(require(arrays, name, ndim).copy(), dtype=DTYPE)

    def i(name, ndim):
        return torch.as_tensor(require(arrays, name, ndim).astype(np.int64))

    eyes = manifest.get("eye_joints", {})
    try:
        model = TemplateModel(
            vertices=f("vertices", 2), faces=i("faces", 2), shape_basis=f("shape_basis", 3),
            head_indices=i("head_indices", 1), face_vertices=f("face_vertices", 2),
            face_shape_basis=f("face_shape_basis", 3), expression_basis=f("expression_basis", 3),
            joint_regressor=sparse("joint_regressor", (K, N)),
            face_joint_regressor=sparse("face_joint_regressor", (kf, H)),
            body_eye_joints=torch.as_tensor(eyes.get("body", []), dtype=torch.long),
            face_eye_joints=torch.as_tensor(eyes.get("face", []), dtype=torch.long),
            weights=f("weights", 2), parents=i("parents", 1), uvs=f("uvs", 3),
            landmark_faces=i("landmark_faces", 1), landmark_bary=f("landmark_bary", 2),
            landmark_labels=tuple(manifest.get("landmark_labels", [])),
            joint_names=tuple(manifest.get("joint_names", [])),
        )
    except (RuntimeError, IndexError) as exc:
        raise ModelFormatError("arrays", str(exc)) from exc
    ranks = manifest.get("basis_ranks", {})
    for key, actual in (("body_shape", model.n_body_shape), ("face_shape", model.n_face_shape),
                        ("expression", model.n_expression)):
        if key in ranks and int(ranks[key]) != actual:
            raise ModelFormatError(key, f"manifest rank {ranks[key]} does not match array rank {actual}")
    return model
