"""Synthetic sequences with known parameters, for recovery tests and demos."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .geometry import DTYPE, Camera
from .model import AvatarParams, TemplateModel, evaluate_ehm
from .tracker import Keypoint, KeypointObservations

# which landmark label prefixes each keypoint set observes
SET_PREFIXES = {
    "body": ("body_", "hand_", "finger_", "face_00", "face_01", "face_02", "face_03"),
    "face1": ("face_", "eye_", "mouth_"),
    "face2": ("face_", "eye_"),
    "face3": ("mouth_", "face_"),
}


@dataclass
class SyntheticSequence:
    params: list[AvatarParams]
    cameras: list[Camera]
    observations: KeypointObservations


def default_camera(width: int = 512, height: int = 512, fx: float = 600.0, distance: float = 1.6) -> Camera:
    return Camera.look_at((0.0, 0.5, distance), (0.0, 0.5, 0.0), fx=fx, width=width, height=height)


def random_params(model: TemplateModel, rng: np.random.Generator, pose_scale: float = 0.15,
                  coeff_scale: float = 0.5) -> AvatarParams:
    p = AvatarParams.zeros(model)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
    return replace(
        p,
        betas_body=t(rng.normal(0, coeff_scale, model.n_body_shape)),
        betas_face=t(rng.normal(0, coeff_scale, model.n_face_shape)),
        expression=t(rng.normal(0, coeff_scale, model.n_expression)),
        pose=t(rng.normal(0, pose_scale, (model.num_joints, 3))),
        joint_offsets=t(rng.normal(0, 0.003, (model.num_joints, 3))),
        global_rot=t(rng.normal(0, 0.05, 3)),
        global_trans=t(rng.normal(0, 0.01, 3)),
    )


def make_sequence(model: TemplateModel, n_frames: int = 8, seed: int = 0, noise_px: float = 0.0,
                  camera: Camera | None = None) -> SyntheticSequence:
    """Smoothly varying ground truth: shared shape, per-frame pose/expression drift."""
    rng = np.random.default_rng(seed)
    cam = camera or default_camera()
    base = random_params(model, rng)
    params = []
    for f in range(n_frames):
        drift = random_params(model, rng, pose_scale=0.03, coeff_scale=0.1)
        params.append(replace(base, expression=base.expression + drift.expression, pose=base.pose + drift.pose,
                              global_rot=base.global_rot + 0.2 * drift.global_rot))
    cams = [cam for _ in range(n_frames)]
    obs = synthesize_keypoints(model, params, cams, rng, noise_px)
    return SyntheticSequence(params, cams, obs)


def synthesize_keypoints(model: TemplateModel, params: list[AvatarParams], cams: list[Camera],
                         rng: np.random.Generator, noise_px: float = 0.0) -> KeypointObservations:
    frames = []
    labels = model.landmark_labels
    for p, cam in zip(params, cams):
        with torch.no_grad():
            lm = evaluate_ehm(model, p, cam, with_rotations=False).landmarks2d.numpy()
        frame = {}
        for name, prefixes in SET_PREFIXES.items():
            kps = []
            for j, lab in enumerate(labels):
                if lab.startswith(prefixes):
                    x, y = lm[j] + (rng.normal(0, noise_px, 2) if noise_px > 0 else 0.0)
                    kps.append(Keypoint(lab, float(x), float(y), 1.0))
            frame[name] = kps
        frames.append(frame)
    return KeypointObservations(frames)


def perturb(params: list[AvatarParams], seed: int = 1, pose: float = 0.05, coeff: float = 0.3) -> list[AvatarParams]:
    """Coarse-estimator stand-in: truth plus noise, shape and joint offsets kept shared across frames."""
    rng = np.random.default_rng(seed)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
    nb, nf = params[0].betas_body.shape[0], params[0].betas_face.shape[0]
    db, df = t(rng.normal(0, coeff, nb)), t(rng.normal(0, coeff, nf))
    dj = t(rng.normal(0, 0.002, tuple(params[0].joint_offsets.shape)))
    out = []
    for p in params:
        out.append(replace(
            p.detach(),
            betas_body=p.betas_body + db,
            betas_face=p.betas_face + df,
            expression=p.expression + t(rng.normal(0, coeff, p.expression.shape[0])),
            pose=p.pose + t(rng.normal(0, pose, tuple(p.pose.shape))),
            joint_offsets=p.joint_offsets + dj,
            global_rot=p.global_rot + t(rng.normal(0, 0.02, 3)),
        ))
    return out


def head_hand_groups(model: TemplateModel) -> dict[str, torch.Tensor]:
    """Head vertices and the vertices most influenced by hand joints."""
    groups = {"head": model.head_indices.clone()}
    hands = model.joints_in_group("hand")
    if hands:
        w = model.weights[:, hands].sum(1)
        groups["hands"] = torch.nonzero(w > 0.5).flatten()
    return groups
