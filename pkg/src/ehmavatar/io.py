"""JSON and binary file formats for keypoints, parameters, cameras, guidance and fit scenes."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgument
from .fitting import FitFrame
from .geometry import Camera
from .model import AvatarParams, TemplateModel
from .raster import read_image
from .tracker import GuidanceMeshes, KeypointObservations

KEYPOINTS_FORMAT = "ehm-keypoints"
PARAMS_FORMAT = "ehm-params"
GUIDANCE_FORMAT = "ehm-guidance"
SCENE_FORMAT = "ehm-scene"


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _check_format(d: dict, expected: str, path) -> None:
    if d.get("format") != expected:
        raise InvalidArgument(f"{path}: expected format {expected!r}, found {d.get('format')!r}")


# keypoints -----------------------------------------------------------------


def save_keypoints(obs: KeypointObservations, path) -> None:
    write_json(path, {"format": KEYPOINTS_FORMAT, **obs.to_dict()})


def load_keypoints(path, model: TemplateModel | None = None) -> KeypointObservations:
    d = read_json(path)
    _check_format(d, KEYPOINTS_FORMAT, path)
    try:
        obs = KeypointObservations.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgument(f"{path}: malformed keypoints ({exc})") from exc
    if model is not None:
        obs.validate(model)
    return obs


# parameters and cameras ----------------------------------------------------


def save_params(path, params: list[AvatarParams], cameras: list[Camera] | None = None, extra: dict | None = None) -> None:
    """Per-frame parameters (and optionally cameras) in one JSON document."""
    d = {"format": PARAMS_FORMAT, "frames": [p.to_dict() for p in params]}
    if cameras is not None:
        d["cameras"] = [c.to_dict() for c in cameras]
    if extra:
        d.update(extra)
    write_json(path, d)


def load_params(path, model: TemplateModel) -> tuple[list[AvatarParams], list[Camera] | None]:
    d = read_json(path)
    _check_format(d, PARAMS_FORMAT, path)
    try:
        params = [AvatarParams.from_dict(f, model) for f in d["frames"]]
        cams = [Camera.from_dict(c) for c in d["cameras"]] if "cameras" in d else None
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgument(f"{path}: malformed parameters ({exc})") from exc
    if not params:
        raise InvalidArgument(f"{path}: no frames")
    return params, cams


def load_cameras(path) -> list[Camera]:
    """A single camera object, or ``{"cameras": [...]}`` with one per frame."""
    d = read_json(path)
    try:
        if "cameras" in d:
            return [Camera.from_dict(c) for c in d["cameras"]]
        return [Camera.from_dict(d)]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgument(f"{path}: malformed camera ({exc})") from exc


def save_camera(path, cam: Camera) -> None:
    write_json(path, cam.to_dict())


# guidance ------------------------------------------------------------------


def save_guidance(guidance: GuidanceMeshes, path) -> None:
    """JSON header plus raw little-endian blocks (int32 indices, float32 ``(F, n, 3)`` targets) next to it."""
    path = Path(path)
    groups = []
    n_frames = 0
    for name, (idx, targets) in guidance.groups.items():
        stem = f"{path.stem}.{name}"
        (path.parent / f"{stem}.idx.bin").write_bytes(idx.numpy().astype("<i4").tobytes())
        (path.parent / f"{stem}.vtx.bin").write_bytes(targets.numpy().astype("<f4").tobytes())
        n_frames = int(targets.shape[0])
        groups.append({"name": name, "count": int(idx.shape[0]), "indices": f"{stem}.idx.bin",
                       "targets": f"{stem}.vtx.bin"})
    write_json(path, {"format": GUIDANCE_FORMAT, "frames": n_frames, "space": "camera", "groups": groups})


def load_guidance(path) -> GuidanceMeshes:
    path = Path(path)
    d = read_json(path)
    _check_format(d, GUIDANCE_FORMAT, path)
    groups = {}
    try:
        n_frames = int(d["frames"])
        for g in d["groups"]:
            n = int(g["count"])
            idx = np.frombuffer((path.parent / g["indices"]).read_bytes(), dtype="<i4")
            vtx = np.frombuffer((path.parent / g["targets"]).read_bytes(), dtype="<f4")
            if idx.size != n or vtx.size != n_frames * n * 3:
                raise InvalidArgument(f"{path}: group {g['name']} has inconsistent block sizes")
            groups[g["name"]] = (torch.as_tensor(idx.astype(np.int64)),
                                 torch.as_tensor(vtx.astype(np.float64).reshape(n_frames, n, 3)))
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise InvalidArgument(f"{path}: malformed guidance ({exc})") from exc
    return GuidanceMeshes(groups)


# fit scenes ----------------------------------------------------------------


def load_scene(path, model: TemplateModel | None) -> tuple[list[FitFrame], Path | None]:
    """Frames of a fit scene manifest; paths are relative to the manifest. Also returns the init avatar path."""
    path = Path(path)
    d = read_json(path)
    _check_format(d, SCENE_FORMAT, path)
    base = path.parent
    frames = []
    try:
        entries = d["frames"]
        if not entries:
            raise InvalidArgument(f"{path}: no frames")
        for e in entries:
            image = base / e["image"]
            if not image.is_file():
                raise InvalidArgument(f"{image}: no such file")
            target = read_image(image)[..., :3]
            cams = load_cameras(base / e["camera"])
            cam = cams[min(int(e.get("camera_frame", 0)), len(cams) - 1)]
            params = None
            if "params" in e:
                if model is None:
                    raise InvalidArgument(f"{path}: frame parameters given without a model")
                plist, _ = load_params(base / e["params"], model)
                params = plist[int(e.get("params_frame", 0))]
            frames.append(FitFrame(target, cam, params, _box(e.get("face_box")), _box(e.get("hand_box"))))
        avatar = base / d["avatar"] if "avatar" in d else None
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, InvalidArgument):
            raise
        raise InvalidArgument(f"{path}: malformed scene ({exc})") from exc
    for fr in frames:
        fr.validate()
    return frames, avatar


def _box(b):
    if b is None:
        return None
    if len(b) != 4:
        raise InvalidArgument("crop boxes are [x0, y0, x1, y1]")
    return tuple(int(v) for v in b)


# loss history --------------------------------------------------------------


def write_history_csv(path, history: list[dict[str, float]], stage: str | None = None) -> None:
    """One row per iteration; columns are the union of term names in first-seen order."""
    _write_rows(path, [dict({"stage": stage} if stage else {}, **h) for h in history])


def write_stage_histories(path, stages: dict[str, list[dict[str, float]]]) -> None:
    _write_rows(path, [dict(stage=name, **h) for name, hist in stages.items() for h in hist])


def _write_rows(path, rows: list[dict]) -> None:
    columns: list[str] = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
