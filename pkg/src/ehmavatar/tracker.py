"""Multi-frame parameter tracking from 2D keypoints.

Three stages run in order: face (face shape, expression, jaw, neck, head
global rotation and per-frame camera), eye (eye joints only) and body
(body/face shape, body and hand pose, joint offsets, camera), the last one
optionally guided by 3D head/hand meshes. All frames are optimized jointly
with Adam and a cosine-decayed step size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidArgument, OptimizationFailure
from .geometry import DTYPE, MIN_DEPTH, Camera, axis_angle_to_matrix
from .model import AvatarParams, TemplateModel, evaluate_ehm_frames, stack_params
from .parallel import fan_out, map_frames, ordered_sum

logger = logging.getLogger(__name__)

FACE_SETS = ("face1", "face2", "face3")
BODY_SET = "body"
RIGID_VARIABLES = ("cam_rot", "cam_trans", "global_rot", "global_trans")
FRAME_CHUNK = 8  # frames per vectorized evaluation; fixed so results do not depend on the thread count


@dataclass
class Keypoint:
    label: str
    x: float
    y: float
    confidence: float = 1.0


@dataclass
class KeypointObservations:
    """Per frame, a mapping from set name (``body``, ``face1``..``face3``) to labeled keypoints."""

    frames: list[dict[str, list[Keypoint]]]

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self, model: TemplateModel) -> None:
        known = model.landmark_index()
        for f, frame in enumerate(self.frames):
            for name, kps in frame.items():
                seen = set()
                for kp in kps:
                    if kp.label not in known:
                        raise InvalidArgument(f"frame {f}, set {name}: unknown landmark label {kp.label!r}")
                    if kp.label in seen:
                        raise InvalidArgument(f"frame {f}, set {name}: duplicate label {kp.label!r}")
                    if not 0.0 <= kp.confidence <= 1.0:
                        raise InvalidArgument(f"frame {f}, set {name}: confidence outside [0, 1]")
                    seen.add(kp.label)

    def to_dict(self) -> dict:
        return {"frames": [{name: [asdict(k) for k in kps] for name, kps in fr.items()} for fr in self.frames]}

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointObservations":
        frames = []
        for fr in d["frames"]:
            frames.append({name: [Keypoint(str(k["label"]), float(k["x"]), float(k["y"]),
                                           float(k.get("confidence", 1.0))) for k in kps]
                           for name, kps in fr.items()})
        return cls(frames)


@dataclass
class GuidanceMeshes:
    """Per-frame target vertices for subsets of the model's vertices.

    Targets are in each frame's camera coordinates, so they constrain the
    mesh as seen by the camera rather than in an arbitrary world frame.
    """

    groups: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)  # name -> (indices (n,), targets (F, n, 3))

    def validate(self, model: TemplateModel, n_frames: int) -> None:
        for name, (idx, targets) in self.groups.items():
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= model.num_vertices):
                raise InvalidArgument(f"guidance group {name}: vertex index out of range")
            if targets.shape != (n_frames, idx.shape[0], 3):
                raise InvalidArgument(f"guidance group {name}: expected targets of shape {(n_frames, idx.shape[0], 3)}")


@dataclass
class TrackingConfig:
    """Loss weights, iteration counts and optimizer settings.

    Iteration counts for the face (1000) and eye (500) stages follow the
    original tracking method; every other default is ours.
    """

    face_keypoint_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    face_smooth: float = 1e-3
    face_reg: float = 1e-4
    body_keypoint: float = 1.0
    body_reg: float = 1e-4
    body_smooth: float = 1e-3
    body_3d: float = 100.0
    body_prior: float = 1e-4
    face_iterations: int = 1000
    eye_iterations: int = 500
    body_iterations: int = 1000
    learning_rate: float = 1e-2
    rigid_lr_scale: float = 0.1
    gradient_tolerance: float = 1e-8
    huber_delta: float = 0.1
    coeff_bound: float = 5.0
    face_stage_guidance: bool = True
    mouth_prefix: str = "mouth"
    eye_prefix: str = "eye"
    face_reg_parameters: tuple[str, ...] = ("betas_face", "expression")
    body_reg_parameters: tuple[str, ...] = ("betas_body", "joint_offsets")

    def __post_init__(self):
        weights = [*self.face_keypoint_weights, self.face_smooth, self.face_reg, self.body_keypoint, self.body_reg,
                   self.body_smooth, self.body_3d, self.body_prior]
        if any(w < 0 for w in weights):
            raise InvalidArgument("loss weights must be non-negative")
        if min(self.face_iterations, self.eye_iterations, self.body_iterations) < 1:
            raise InvalidArgument("iteration counts must be >= 1")
        if self.learning_rate <= 0 or self.huber_delta <= 0:
            raise InvalidArgument("learning rate and Huber width must be positive")
        if self.gradient_tolerance < 0:
            raise InvalidArgument("gradient tolerance must be non-negative")
        self.face_keypoint_weights = tuple(self.face_keypoint_weights)
        self.face_reg_parameters = tuple(self.face_reg_parameters)
        self.body_reg_parameters = tuple(self.body_reg_parameters)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown tracking config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageResult:
    params: list[AvatarParams]
    cameras: list[Camera]
    breakdown: dict[str, float]
    history: list[dict[str, float]]
    status: str = "ok"
    rmse: dict[str, float] = field(default_factory=dict)


# --------------------------------------------------------------------------
# loss building blocks
# --------------------------------------------------------------------------


@dataclass
class ResolvedSet:
    landmarks: Tensor  # (M,) landmark indices
    targets: Tensor  # (F, M, 2)
    conf: Tensor  # (F, M), 0 where a frame lacks the keypoint

    @property
    def size(self) -> int:
        return self.landmarks.shape[0]


def resolve_set(model: TemplateModel, obs: KeypointObservations, name: str,
                prefix: str | None = None) -> ResolvedSet | None:
    """Gather one keypoint set into dense tensors; labels missing in a frame get zero confidence."""
    index = model.landmark_index()
    labels: list[str] = []
    for frame in obs.frames:
        for kp in frame.get(name, []):
            if kp.label not in index:
                raise InvalidArgument(f"set {name}: unknown landmark label {kp.label!r}")
            if (prefix is None or kp.label.startswith(prefix)) and kp.label not in labels:
                labels.append(kp.label)
    if not labels:
        return None
    col = {lab: j for j, lab in enumerate(labels)}
    n = len(obs)
    targets = torch.zeros(n, len(labels), 2, dtype=DTYPE)
    conf = torch.zeros(n, len(labels), dtype=DTYPE)
    for f, frame in enumerate(obs.frames):
        for kp in frame.get(name, []):
            if kp.label in col:
                targets[f, col[kp.label]] = torch.tensor([kp.x, kp.y], dtype=DTYPE)
                conf[f, col[kp.label]] = kp.confidence
    lm = torch.tensor([index[lab] for lab in labels], dtype=torch.long)
    return ResolvedSet(lm, targets, conf)


def keypoint_loss(pred, target, conf, delta: float) -> Tensor:
    """Confidence-weighted L1 with a Huber transition of width ``delta`` pixels.

    ``(..., M, 2)`` predictions and targets with ``(..., M)`` confidences;
    returns the mean over the ``M`` keypoints for each leading index.
    """
    per = F.smooth_l1_loss(pred, target, reduction="none", beta=delta).sum(-1)
    return (conf * per).sum(-1) / max(conf.shape[-1], 1)


def smoothness(seq: Tensor) -> Tensor:
    """Sum of squared differences between consecutive frames; zero for a single frame."""
    if seq.shape[0] < 2:
        return seq.sum() * 0.0
    return ((seq[1:] - seq[:-1]) ** 2).sum()


def safe_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis whose gradient at zero is zero rather than NaN."""
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def quadratic_pose_prior(pose_rows: Tensor) -> Tensor:
    """Stand-in pose prior pulling body joints toward the neutral pose."""
    return (pose_rows**2).sum()


@dataclass
class CameraStack:
    """Per-frame pinhole cameras as stacked tensors."""

    intrinsics: Tensor  # (B, 4) fx, fy, cx, cy
    rotation: Tensor  # (B, 3, 3)
    translation: Tensor  # (B, 3)

    @classmethod
    def from_cameras(cls, cams: list[Camera]) -> "CameraStack":
        return cls(torch.tensor([[c.fx, c.fy, c.cx, c.cy] for c in cams], dtype=DTYPE),
                   torch.stack([c.rotation for c in cams]), torch.stack([c.translation for c in cams]))

    def to_camera(self, points: Tensor) -> Tensor:
        return points @ self.rotation.transpose(-1, -2) + self.translation[:, None]

    def project(self, points: Tensor) -> Tensor:
        """``(B, L, 3)`` world points to ``(B, L, 2)`` pixels."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        z = torch.where(z.abs() < MIN_DEPTH, torch.full_like(z, MIN_DEPTH), z)
        k = self.intrinsics[:, None]
        return torch.stack([k[..., 0] * pc[..., 0] / z + k[..., 2], k[..., 1] * pc[..., 1] / z + k[..., 3]], -1)


def unstack_params(stacked: AvatarParams) -> list[AvatarParams]:
    n = stacked.pose.shape[0]
    return [AvatarParams(**{f: getattr(stacked, f)[b].detach().clone() for f in PARAM_FIELDS}) for b in range(n)]


PARAM_FIELDS = tuple(f.name for f in fields(AvatarParams))


def reprojection_rmse(model: TemplateModel, params: list[AvatarParams], cams: list[Camera],
                      sets: list[ResolvedSet]) -> float:
    """Root-mean-square pixel distance over keypoints with positive confidence in ``sets``."""
    with torch.no_grad():
        lm = evaluate_ehm_frames(model, stack_params(params)).landmarks3d
        uv = CameraStack.from_cameras(cams).project(lm)
    sq, count = 0.0, 0
    for rs in sets:
        mask = rs.conf > 0
        sq += float((((uv[:, rs.landmarks] - rs.targets) ** 2).sum(-1))[mask].sum())
        count += int(mask.sum())
    return math.sqrt(sq / count) if count else 0.0


def observation_rmse(model: TemplateModel, obs: KeypointObservations, params: list[AvatarParams],
                     cams: list[Camera]) -> float:
    """Reprojection RMSE over every confident keypoint of every set."""
    names = sorted({name for frame in obs.frames for name in frame})
    sets = [rs for rs in (resolve_set(model, obs, name) for name in names) if rs is not None]
    return reprojection_rmse(model, params, cams, sets)


# --------------------------------------------------------------------------
# optimization driver
# --------------------------------------------------------------------------


def optimize(variables: dict[str, Tensor], objective: Callable[[], dict[str, Tensor]], iterations: int,
             lr: float, stage: str, clamp: Callable[[], None] | None = None,
             lr_scale: dict[str, float] | None = None, grad_tol: float = 0.0) -> list[dict[str, float]]:
    """Adam with cosine step decay. ``objective`` returns the weighted loss terms.

    ``lr_scale`` multiplies the step size of individual variables. Stops
    early once every gradient entry is below ``grad_tol``; Adam would
    otherwise rescale round-off gradients at a minimum into full-size steps.
    """
    lr_scale = lr_scale or {}
    leaves = [v.requires_grad_(True) for v in variables.values()]
    groups = [{"params": [v], "lr": lr * lr_scale.get(name, 1.0)} for name, v in variables.items()]
    opt = torch.optim.Adam(groups, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=iterations)
    history = []
    for it in range(iterations):
        opt.zero_grad(set_to_none=False)
        terms = objective()
        total = ordered_sum(list(terms.values()))
        if not torch.isfinite(total):
            raise OptimizationFailure(f"{stage} loss is not finite", it)
        total.backward()
        history.append({"iteration": it, "total": total.item(), **{k: v.item() for k, v in terms.items()}})
        if max(float(v.grad.abs().max()) for v in leaves if v.grad is not None and v.numel()) < grad_tol:
            logger.info("%s stage converged at iteration %d", stage, it)
            break
        opt.step()
        sched.step()
        if clamp is not None:
            with torch.no_grad():
                clamp()
    for v in leaves:
        v.requires_grad_(False)
    return history


def loss_breakdown(terms: dict[str, Tensor]) -> dict[str, float]:
    """Named weighted terms plus their sum under ``total``."""
    out = {k: float(v) for k, v in terms.items()}
    out["total"] = float(ordered_sum(list(terms.values()))) if terms else 0.0
    return out


def compute_loss_breakdown(problem: "StageProblem") -> dict[str, float]:
    with torch.no_grad():
        return loss_breakdown(problem.terms())


def _check_frames(model, obs, params, cams):
    if len(obs) < 1:
        raise InvalidArgument("need at least one frame")
    if len(params) != len(obs) or len(cams) != len(obs):
        raise InvalidArgument("one initial parameter set and camera per frame required")
    obs.validate(model)
    for p in params:
        p.validate(model)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


class StageProblem:
    """Shared machinery: frame-chunked evaluation, camera updates and result assembly.

    Frames are evaluated in fixed chunks of ``FRAME_CHUNK`` (independent of
    the thread count) and per-frame terms are reduced in frame order, so the
    loss is bit-identical however the chunks are scheduled.
    """

    stage = "stage"
    set_names: tuple[str, ...] = ()

    def __init__(self, model: TemplateModel, cfg: TrackingConfig, base: list[AvatarParams], cams: list[Camera],
                 sets: dict[str, ResolvedSet], weights: dict[str, float]):
        self.model, self.cfg = model, cfg
        self.n = len(base)
        self.base = stack_params([p.detach() for p in base])
        self.cam_templates = cams
        self.cams0 = CameraStack.from_cameras(cams)
        self.sets, self.weights = sets, weights
        self.guidance: GuidanceMeshes | None = None
        self.vars: dict[str, Tensor] = {}
        self.chunks = [torch.arange(s, min(s + FRAME_CHUNK, self.n)) for s in range(0, self.n, FRAME_CHUNK)]

    def _rows(self, rows: list[int]) -> Tensor:
        return torch.tensor(rows, dtype=torch.long)

    def params_for(self, idx: Tensor, v: dict[str, Tensor] | None = None) -> AvatarParams:
        """Stacked parameters of frames ``idx`` from variables ``v`` (default: the live ones)."""
        raise NotImplementedError

    def cams_for(self, idx: Tensor, v: dict[str, Tensor] | None = None) -> CameraStack:
        v = self.vars if v is None else v
        if "cam_rot" not in v:
            return CameraStack(self.cams0.intrinsics[idx], self.cams0.rotation[idx], self.cams0.translation[idx])
        R = axis_angle_to_matrix(v["cam_rot"][idx]) @ self.cams0.rotation[idx]
        return CameraStack(self.cams0.intrinsics[idx], R, self.cams0.translation[idx] + v["cam_trans"][idx])

    def chunk_terms(self, c: int, v: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        idx = self.chunks[c]
        out = evaluate_ehm_frames(self.model, self.params_for(idx, v))
        cams = self.cams_for(idx, v)
        uv = cams.project(out.landmarks3d)
        terms = {}
        for name, rs in self.sets.items():
            terms[name] = keypoint_loss(uv[:, rs.landmarks], rs.targets[idx], rs.conf[idx], self.cfg.huber_delta)
        if self.guidance is not None and self.guidance.groups:
            terms["guidance"] = ordered_sum([safe_norm(cams.to_camera(out.vertices[:, g_idx]) - targets[idx]).sum(-1)
                                             for g_idx, targets in self.guidance.groups.values()])
        return terms

    def data_terms(self) -> dict[str, Tensor]:
        """Per-set keypoint losses (mean over frames) and the guidance distance sum."""
        k = len(self.chunks)
        copies = {name: fan_out(t, k) for name, t in self.vars.items()}
        views = [{name: c[i] for name, c in copies.items()} for i in range(k)]
        per_chunk = map_frames(lambda i: self.chunk_terms(i, views[i]), k)
        return {name: torch.cat([t[name] for t in per_chunk]) for name in per_chunk[0]}

    def keypoint_terms(self, data: dict[str, Tensor]) -> dict[str, Tensor]:
        return {f"keypoint_{name}": self.weights[name] * data[name].sum() / self.n for name in self.sets}

    def camera_smoothness(self) -> Tensor:
        if "cam_rot" not in self.vars:
            return torch.zeros((), dtype=DTYPE)
        cams = self.cams_for(torch.arange(self.n))
        return smoothness(cams.rotation) + smoothness(cams.translation)

    def terms(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def clamp(self) -> None:
        pass

    def current_params(self) -> list[AvatarParams]:
        with torch.no_grad():
            return unstack_params(self.params_for(torch.arange(self.n)))

    def current_cameras(self) -> list[Camera]:
        with torch.no_grad():
            cams = self.cams_for(torch.arange(self.n))
        return [c.with_extrinsics(cams.rotation[b].clone(), cams.translation[b].clone())
                for b, c in enumerate(self.cam_templates)]

    def result(self, history, status: str = "ok") -> StageResult:
        params, cams = self.current_params(), self.current_cameras()
        rmse = {name: reprojection_rmse(self.model, params, cams, [rs]) for name, rs in self.sets.items()}
        rmse["all"] = reprojection_rmse(self.model, params, cams, list(self.sets.values()))
        return StageResult(params, cams, compute_loss_breakdown(self), history, status, rmse)

    def run(self, iterations: int) -> StageResult:
        history = optimize(self.vars, self.terms, iterations, self.cfg.learning_rate, self.stage, self.clamp,
                           {name: self.cfg.rigid_lr_scale for name in RIGID_VARIABLES}, self.cfg.gradient_tolerance)
        res = self.result(history)
        logger.info("%s stage: loss %.4g, rmse %s", self.stage, res.breakdown["total"], res.rmse)
        return res


def _face_sets(model, obs, cfg: TrackingConfig, prefix: str | None = None):
    sets, weights = {}, {}
    for i, name in enumerate(FACE_SETS):
        p = prefix if prefix is not None else (cfg.mouth_prefix if name == "face3" else None)
        rs = resolve_set(model, obs, name, p)
        if rs is not None:
            sets[name], weights[name] = rs, cfg.face_keypoint_weights[i]
    return sets, weights


class FaceProblem(StageProblem):
    """Face shape (shared), expression, jaw, neck, head global rotation and cameras (per frame)."""

    stage = "face"

    def __init__(self, model, obs, init_params, init_cams, cfg: TrackingConfig):
        _check_frames(model, obs, init_params, init_cams)
        sets, weights = _face_sets(model, obs, cfg)
        if not sets:
            raise InvalidArgument("no resolvable facial keypoints")
        super().__init__(model, cfg, init_params, init_cams, sets, weights)
        self.rows = self._rows(model.joints_in_group("jaw") + model.joints_in_group("neck"))
        self.vars = {
            "betas_face": self.base.betas_face[0].clone(),
            "expression": self.base.expression.clone(),
            "head_pose": self.base.pose[:, self.rows].clone(),
            "global_rot": self.base.global_rot.clone(),
            "cam_rot": torch.zeros(self.n, 3, dtype=DTYPE),
            "cam_trans": torch.zeros(self.n, 3, dtype=DTYPE),
        }

    def params_for(self, idx, v=None):
        v, b = self.vars if v is None else v, self.base
        pose = b.pose[idx].clone()
        pose[:, self.rows] = v["head_pose"][idx]
        return replace(_select(b, idx), betas_face=v["betas_face"].expand(len(idx), -1), expression=v["expression"][idx],
                       pose=pose, global_rot=v["global_rot"][idx])

    def terms(self):
        cfg, v = self.cfg, self.vars
        out = self.keypoint_terms(self.data_terms())
        out["smooth"] = cfg.face_smooth * (smoothness(v["expression"]) + smoothness(v["head_pose"])
                                           + smoothness(v["global_rot"]) + self.camera_smoothness())
        reg = torch.zeros((), dtype=DTYPE)
        for name in ("betas_face", "expression"):
            if name in cfg.face_reg_parameters:
                reg = reg + (v[name] ** 2).sum()
        out["reg"] = cfg.face_reg * reg
        return out

    def clamp(self):
        b = self.cfg.coeff_bound
        self.vars["betas_face"].clamp_(-b, b)
        self.vars["expression"].clamp_(-b, b)


def _select(stacked: AvatarParams, idx: Tensor) -> AvatarParams:
    return AvatarParams(**{f: getattr(stacked, f)[idx] for f in PARAM_FIELDS})


def face_track(model: TemplateModel, obs: KeypointObservations, init_params: list[AvatarParams],
               init_cams: list[Camera], cfg: TrackingConfig | None = None) -> StageResult:
    cfg = cfg or TrackingConfig()
    return FaceProblem(model, obs, init_params, init_cams, cfg).run(cfg.face_iterations)


class EyeProblem(StageProblem):
    """Eye joints only, driven by eye-labeled facial keypoints; cameras stay fixed."""

    stage = "eye"

    def __init__(self, model, obs, face: StageResult, cfg: TrackingConfig):
        sets, weights = _face_sets(model, obs, cfg, prefix=cfg.eye_prefix)
        super().__init__(model, cfg, face.params, face.cameras, sets, weights)
        self.rows = self._rows(model.joints_in_group("eye"))
        self.vars = {"eye_pose": self.base.pose[:, self.rows].clone()}

    @property
    def empty(self) -> bool:
        return not self.sets or self.rows.numel() == 0

    def params_for(self, idx, v=None):
        v = self.vars if v is None else v
        pose = self.base.pose[idx].clone()
        pose[:, self.rows] = v["eye_pose"][idx]
        return replace(_select(self.base, idx), pose=pose)

    def terms(self):
        out = self.keypoint_terms(self.data_terms())
        out["smooth"] = self.cfg.face_smooth * smoothness(self.vars["eye_pose"])
        return out


def eye_track(model: TemplateModel, obs: KeypointObservations, face: StageResult,
              cfg: TrackingConfig | None = None) -> StageResult:
    """Refine eye joints only; skipped (parameters unchanged) when there are no eye keypoints."""
    cfg = cfg or TrackingConfig()
    prob = EyeProblem(model, obs, face, cfg)
    if prob.empty:
        logger.warning("eye stage skipped: no eye keypoints or eye joints")
        return StageResult(face.params, face.cameras, {"total": 0.0}, [], "skipped")
    return prob.run(cfg.eye_iterations)


class BodyProblem(StageProblem):
    """Body/face shape and joint offsets (shared); body, neck and hand pose, body translation and cameras (per frame).

    Starts from the face-stage result for the head (expression, jaw, eyes),
    global rotation and cameras, and from the coarse init for body shape,
    joint offsets and body/hand pose.
    """

    stage = "body"

    def __init__(self, model, obs, face: StageResult, init_params, cfg: TrackingConfig,
                 guidance: GuidanceMeshes | None = None, prior: Callable[[Tensor], Tensor] = quadratic_pose_prior):
        _check_frames(model, obs, init_params, face.cameras)
        rs = resolve_set(model, obs, BODY_SET)
        if rs is None:
            raise InvalidArgument("no resolvable body keypoints")
        body_rows = model.joints_in_group("body") + model.joints_in_group("neck")
        rows = self._rows(body_rows + model.joints_in_group("hand"))
        base = []
        for p, fp in zip(init_params, face.params):
            pose = fp.pose.clone()
            pose[rows] = p.pose[rows]
            base.append(replace(fp.detach(), betas_body=p.betas_body.clone(), joint_offsets=p.joint_offsets.clone(),
                                pose=pose))
        super().__init__(model, cfg, base, face.cameras, {BODY_SET: rs}, {BODY_SET: cfg.body_keypoint})
        if guidance is not None:
            guidance.validate(model, self.n)
        self.guidance, self.prior = guidance, prior
        self.rows, self.n_body = rows, len(body_rows)
        self.guidance_count = sum(int(i.numel()) for i, _ in guidance.groups.values()) if guidance else 0
        self.vars = {
            "betas_body": self.base.betas_body[0].clone(),
            "betas_face": self.base.betas_face[0].clone(),
            "joint_offsets": self.base.joint_offsets[0].clone(),
            "pose": self.base.pose[:, rows].clone(),
            "global_trans": self.base.global_trans.clone(),
            "cam_rot": torch.zeros(self.n, 3, dtype=DTYPE),
            "cam_trans": torch.zeros(self.n, 3, dtype=DTYPE),
        }

    def params_for(self, idx, v=None):
        v = self.vars if v is None else v
        m = len(idx)
        pose = self.base.pose[idx].clone()
        pose[:, self.rows] = v["pose"][idx]
        return replace(_select(self.base, idx), betas_body=v["betas_body"].expand(m, -1),
                       betas_face=v["betas_face"].expand(m, -1), joint_offsets=v["joint_offsets"].expand(m, -1, -1),
                       pose=pose, global_trans=v["global_trans"][idx])

    def terms(self):
        cfg, v = self.cfg, self.vars
        data = self.data_terms()
        out = self.keypoint_terms(data)
        reg = torch.zeros((), dtype=DTYPE)
        for name in cfg.body_reg_parameters:
            if name in v:
                reg = reg + (v[name] ** 2).sum()
        out["reg"] = cfg.body_reg * reg
        out["smooth"] = cfg.body_smooth * (smoothness(v["pose"]) + smoothness(v["global_trans"])
                                           + self.camera_smoothness())
        if "guidance" in data and self.guidance_count:
            l3d = data["guidance"].sum() / (self.n * self.guidance_count)
        else:
            l3d = torch.zeros((), dtype=DTYPE)
        out["guidance_3d"] = cfg.body_3d * l3d
        out["prior"] = cfg.body_prior * self.prior(v["pose"][:, : self.n_body])
        return out

    def clamp(self):
        b = self.cfg.coeff_bound
        self.vars["betas_body"].clamp_(-b, b)
        self.vars["betas_face"].clamp_(-b, b)


def body_track(model: TemplateModel, obs: KeypointObservations, face: StageResult, init_params: list[AvatarParams],
               cfg: TrackingConfig | None = None, guidance: GuidanceMeshes | None = None,
               prior: Callable[[Tensor], Tensor] = quadratic_pose_prior) -> StageResult:
    cfg = cfg or TrackingConfig()
    return BodyProblem(model, obs, face, init_params, cfg, guidance, prior).run(cfg.body_iterations)


@dataclass
class TrackingResult:
    face: StageResult
    eye: StageResult
    body: StageResult

    @property
    def params(self) -> list[AvatarParams]:
        return self.body.params

    @property
    def cameras(self) -> list[Camera]:
        return self.body.cameras


def guidance_from_params(model: TemplateModel, params: list[AvatarParams], cams: list[Camera],
                         groups: dict[str, Tensor]) -> GuidanceMeshes:
    """Camera-space vertices of ``params`` for each named vertex group."""
    with torch.no_grad():
        verts = CameraStack.from_cameras(cams).to_camera(evaluate_ehm_frames(model, stack_params(params)).vertices)
    return GuidanceMeshes({name: (idx.clone(), verts[:, idx].clone()) for name, idx in groups.items()})


def head_guidance(model: TemplateModel, stage: StageResult) -> GuidanceMeshes:
    """Head vertices of already-tracked frames, used to hold the face in place during the body stage."""
    return guidance_from_params(model, stage.params, stage.cameras, {"head": model.head_indices})


def track(model: TemplateModel, obs: KeypointObservations, init_params: list[AvatarParams], init_cams: list[Camera],
          cfg: TrackingConfig | None = None, guidance: GuidanceMeshes | None = None) -> TrackingResult:
    """Run face, eye and body stages in order.

    Without explicit guidance the body stage is guided by the head vertices
    of the eye-stage result (``face_stage_guidance``).
    """
    cfg = cfg or TrackingConfig()
    face = face_track(model, obs, init_params, init_cams, cfg)
    eye = eye_track(model, obs, face, cfg)
    if guidance is None and cfg.face_stage_guidance:
        guidance = head_guidance(model, eye)
    body = body_track(model, obs, eye, init_params, cfg, guidance)
    return TrackingResult(face, eye, body)


def zero_init(model: TemplateModel, n_frames: int) -> list[AvatarParams]:
    return [AvatarParams.zeros(model) for _ in range(n_frames)]
