"""Direct optimization of avatar splat attributes against target images.

Stands in for a feed-forward reconstruction network: canonical template
and UV splat attributes are optimized through animation and splatting
with an L1 image loss (plus face/hand crop terms) and the position and
scale regularizers of the UV splats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import torch
import torch.nn.functional as F
from torch import Tensor

from .avatar import Avatar, GaussianSet, UVGaussianSet, animate_uv_gaussians, bind_template_gaussians
from .errors import InvalidArgument, OptimizationFailure
from .geometry import DTYPE, Camera, as_tensor, quat_normalize
from .model import AvatarParams, TemplateModel, evaluate_ehm
from .parallel import fan_out, map_frames, ordered_sum
from .raster import splat_gaussians

logger = logging.getLogger(__name__)

OPACITY_EPS = 1e-6


@dataclass
class FitConfig:
    """Loss weights and thresholds; image/regularizer weights and thresholds follow the original method.

    ``iterations`` and ``learning_rate`` are ours.
    """

    lambda_l1: float = 1.0
    lambda_face: float = 0.25
    lambda_hand: float = 0.1
    lambda_pos: float = 0.01
    lambda_sca: float = 1.0
    eps_pos: float = 3.0
    eps_sca: float = 0.6
    iterations: int = 2000
    learning_rate: float = 1e-2

    def __post_init__(self):
        weights = (self.lambda_l1, self.lambda_face, self.lambda_hand, self.lambda_pos, self.lambda_sca)
        if any(w < 0 for w in weights) or self.eps_pos < 0 or self.eps_sca < 0:
            raise InvalidArgument("weights and thresholds must be non-negative")
        if self.iterations < 1 or self.learning_rate <= 0:
            raise InvalidArgument("need iterations >= 1 and a positive step size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)


Box = tuple[int, int, int, int]  # x0, y0, x1, y1 (end-exclusive pixels)


@dataclass
class FitFrame:
    target: Tensor  # (H, W, 3) in [0, 1]
    camera: Camera
    params: AvatarParams | None = None
    face_box: Box | None = None
    hand_box: Box | None = None

    def validate(self) -> None:
        t = self.target
        if t.ndim != 3 or t.shape[2] != 3:
            raise InvalidArgument("target image must be (H, W, 3)")
        H, W = t.shape[:2]
        if (H, W) != (self.camera.height, self.camera.width):
            raise InvalidArgument(f"target is {W}x{H} but the camera renders {self.camera.width}x{self.camera.height}")
        for name, box in (("face_box", self.face_box), ("hand_box", self.hand_box)):
            if box is None:
                continue
            x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
                raise InvalidArgument(f"{name} {box} is empty or outside the {W}x{H} image")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _crop(img: Tensor, box: Box) -> Tensor:
    x0, y0, x1, y1 = box
    return img[y0:y1, x0:x1]


def l1(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def image_terms(rendered: Tensor, target: Tensor, cfg: FitConfig, face_box: Box | None = None,
                hand_box: Box | None = None) -> dict[str, Tensor]:
    """Weighted full-image, face-crop and hand-crop L1 terms (crop terms are 0 without a box)."""
    zero = torch.zeros((), dtype=DTYPE)
    return {
        "image_l1": cfg.lambda_l1 * l1(rendered, target),
        "image_face": cfg.lambda_face * cfg.lambda_l1 * l1(_crop(rendered, face_box), _crop(target, face_box))
        if face_box is not None else zero,
        "image_hand": cfg.lambda_hand * cfg.lambda_l1 * l1(_crop(rendered, hand_box), _crop(target, hand_box))
        if hand_box is not None else zero,
    }


def loss_image_l1(rendered, target, cfg: FitConfig | None = None, face_box: Box | None = None,
                  hand_box: Box | None = None) -> Tensor:
    cfg = cfg or FitConfig()
    return ordered_sum(list(image_terms(as_tensor(rendered), as_tensor(target), cfg, face_box, hand_box).values()))


def hinge_norm(x: Tensor, eps: float) -> Tensor:
    """``|| max(|x|, eps) ||_2`` over all entries; entries below ``eps`` have zero gradient."""
    return torch.linalg.vector_norm(torch.clamp_min(x.abs(), eps))


def loss_pos(uv: UVGaussianSet | Tensor, eps_pos: float = 3.0) -> Tensor:
    offsets = uv.offsets if isinstance(uv, UVGaussianSet) else as_tensor(uv)
    return hinge_norm(offsets, eps_pos)


def loss_sca(uv: UVGaussianSet | Tensor, eps_sca: float = 0.6) -> Tensor:
    scales = uv.scales if isinstance(uv, UVGaussianSet) else as_tensor(uv)
    return hinge_norm(scales, eps_sca)


# --------------------------------------------------------------------------
# parameterization
# --------------------------------------------------------------------------


def _inv_softplus(s: Tensor) -> Tensor:
    return s + torch.log(-torch.expm1(-s))


def _logit(p: Tensor) -> Tensor:
    p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
    return torch.log(p) - torch.log1p(-p)


class SplatParameters:
    """Unconstrained leaves for an avatar: softplus scales, sigmoid opacity, normalized quaternions.

    With ``static_template`` the template splat positions are free too
    (used when splats are rendered directly in world space, without a model).
    """

    def __init__(self, avatar: Avatar, static_template: bool = False):
        t, u = avatar.template, avatar.uv
        self.static_template = static_template
        self.uv_binding = u
        self.leaves: dict[str, Tensor] = {
            "template_quats": t.quats.detach().clone(),
            "template_scales": _inv_softplus(t.scales.detach()),
            "template_opacity": _logit(t.opacity.detach()),
            "template_features": t.features.detach().clone(),
            "uv_offsets": u.offsets.detach().clone(),
            "uv_quats": u.quats.detach().clone(),
            "uv_scales": _inv_softplus(u.scales.detach()),
            "uv_opacity": _logit(u.opacity.detach()),
            "uv_features": u.features.detach().clone(),
        }
        self.template_means = t.means.detach().clone()
        if static_template:
            self.leaves["template_means"] = self.template_means

    def avatar(self) -> Avatar:
        p = self.leaves
        template = GaussianSet(p.get("template_means", self.template_means), quat_normalize(p["template_quats"]),
                               F.softplus(p["template_scales"]), torch.sigmoid(p["template_opacity"]),
                               p["template_features"])
        uv = self.uv_binding.with_attributes(offsets=p["uv_offsets"], quats=quat_normalize(p["uv_quats"]),
                                             scales=F.softplus(p["uv_scales"]), opacity=torch.sigmoid(p["uv_opacity"]),
                                             features=p["uv_features"])
        return Avatar(template, uv)


def posed_splats(model: TemplateModel | None, avatar: Avatar, params: AvatarParams | None) -> GaussianSet:
    """World-space splats for one frame; without a model the template set is taken as world splats."""
    if model is None:
        return avatar.template
    out = evaluate_ehm(model, params if params is not None else AvatarParams.zeros(model))
    parts = []
    if len(avatar.template):
        parts.append(bind_template_gaussians(out.vertices, out.rotations, avatar.template))
    if len(avatar.uv):
        parts.append(animate_uv_gaussians(out.vertices, model.faces, avatar.uv).splats)
    return GaussianSet.concat(parts) if parts else avatar.template


def render_rgb(model, avatar: Avatar, frame: FitFrame) -> Tensor:
    return splat_gaussians(posed_splats(model, avatar, frame.params), frame.camera).rgb


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


def _set_copies(s, n: int) -> list:
    cols = {f.name: fan_out(getattr(s, f.name), n) for f in fields(s)}
    return [replace(s, **{k: c[i] for k, c in cols.items()}) for i in range(n)]


def _avatar_copies(avatar: Avatar, n: int) -> list[Avatar]:
    """One avatar per frame so frame-parallel backward passes accumulate in a fixed order."""
    return [Avatar(t, u) for t, u in zip(_set_copies(avatar.template, n), _set_copies(avatar.uv, n))]


def fit_terms(model, avatar: Avatar, frames: list[FitFrame], cfg: FitConfig) -> dict[str, Tensor]:
    """All weighted loss terms; image terms are averaged over frames, zero-weight regularizers are omitted."""
    copies = _avatar_copies(avatar, len(frames))

    def frame_terms(f: int) -> dict[str, Tensor]:
        fr = frames[f]
        return image_terms(render_rgb(model, copies[f], fr), fr.target, cfg, fr.face_box, fr.hand_box)

    per_frame = map_frames(frame_terms, len(frames))
    terms = {name: ordered_sum([t[name] for t in per_frame]) / len(frames) for name in per_frame[0]}
    if cfg.lambda_pos > 0:
        terms["pos"] = cfg.lambda_pos * loss_pos(avatar.uv, cfg.eps_pos)
    if cfg.lambda_sca > 0:
        terms["sca"] = cfg.lambda_sca * loss_sca(avatar.uv, cfg.eps_sca)
    return terms


def breakdown(terms: dict[str, Tensor]) -> dict[str, float]:
    out = {k: float(v) for k, v in terms.items()}
    out["total"] = float(ordered_sum(list(terms.values())))
    return out


@dataclass
class FitResult:
    avatar: Avatar
    history: list[dict[str, float]]
    breakdown: dict[str, float] = field(default_factory=dict)


def _check_scene(model, avatar: Avatar, frames: list[FitFrame]) -> None:
    if not frames:
        raise InvalidArgument("need at least one frame")
    for fr in frames:
        fr.validate()
        if model is not None and fr.params is not None:
            fr.params.validate(model)
    avatar.template.validate()
    avatar.uv.validate(model.num_faces if model is not None else None)
    if model is None and len(avatar.uv):
        raise InvalidArgument("UV splats need a model to be rigged to")
    if model is not None and len(avatar.template) not in (0, model.num_vertices):
        raise InvalidArgument("template splats must match the model's vertices")


def fit(frames: list[FitFrame], model: TemplateModel | None, init: Avatar, cfg: FitConfig | None = None) -> FitResult:
    """Adam on the unconstrained splat attributes; returns the fitted avatar and the per-iteration loss history."""
    cfg = cfg or FitConfig()
    _check_scene(model, init, frames)
    params = SplatParameters(init, static_template=model is None)
    leaves = [v.requires_grad_(True) for v in params.leaves.values()]
    opt = torch.optim.Adam(leaves, lr=cfg.learning_rate)
    history = []
    for it in range(cfg.iterations):
        opt.zero_grad(set_to_none=False)
        terms = fit_terms(model, params.avatar(), frames, cfg)
        total = ordered_sum(list(terms.values()))
        if not torch.isfinite(total):
            raise OptimizationFailure("fit loss is not finite", it)
        total.backward()
        history.append({"iteration": it, "total": total.item(), **{k: v.item() for k, v in terms.items()}})
        opt.step()
    for v in leaves:
        v.requires_grad_(False)
    fitted = params.avatar().detach()
    with torch.no_grad():
        final = breakdown(fit_terms(model, fitted, frames, cfg))
    logger.info("fit: %d iterations, final loss %.4g", cfg.iterations, final["total"])
    return FitResult(fitted, history, final)


def mean_abs_error(model, avatar: Avatar, frames: list[FitFrame]) -> float:
    """Per-pixel L1 between renders and targets, averaged over frames."""
    with torch.no_grad():
        errs = [float(l1(render_rgb(model, avatar, fr), fr.target)) for fr in frames]
    return math.fsum(errs) / len(errs)
