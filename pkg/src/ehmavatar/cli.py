"""Command-line entry point: ``ehmavatar <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import AvatarError, InvalidArgument, OptimizationFailure
from .parallel import set_threads

logger = logging.getLogger("ehmavatar")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class Run:
    """Collects output files and metrics for the ``--json-report``."""

    def __init__(self, command: str):
        self.command = command
        self.outputs: dict[str, str] = {}
        self.metrics: dict = {}

    def output(self, path) -> Path:
        path = Path(path)
        self.outputs[str(path)] = ""
        return path

    def report(self, status: str, code: int, message: str | None = None) -> dict:
        outputs = {}
        for p in sorted(self.outputs):
            if Path(p).is_file():
                outputs[p] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
        rep = {"command": self.command, "version": __version__, "status": status, "exit_code": code,
               "outputs": outputs, "metrics": self.metrics}
        if message:
            rep["message"] = message
        return rep


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument(f"{what} {path}: no such file")
    return path


def _load_model(path):
    from .model import load_model

    return load_model(_require_file(path, "model"))


def _out_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_make_toy(args, run: Run) -> None:
    from .avatar import Avatar, make_template_gaussians, make_uv_gaussians, save_avatar
    from .model import AvatarParams, compose_rest_mesh, load_model, make_toy_model, save_model
    from .uvmap import build_uv_lookup

    model = make_toy_model(seed=args.seed, N=args.vertices, K=args.joints)
    out = run.output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    load_model(out)  # round-trip validation
    run.metrics.update(vertices=model.num_vertices, joints=model.num_joints, faces=model.num_faces,
                       landmarks=len(model.landmark_labels))
    if args.avatar:
        lookup = build_uv_lookup(model, args.atlas, args.atlas)
        rest = compose_rest_mesh(model, AvatarParams.zeros(model))
        avatar = Avatar(make_template_gaussians(rest, latent_dim=args.latent),
                        make_uv_gaussians(lookup, latent_dim=args.latent))
        save_avatar(avatar, run.output(args.avatar))
        run.metrics.update(template_splats=len(avatar.template), uv_splats=len(avatar.uv))


def cmd_synth(args, run: Run) -> None:
    from .avatar import load_avatar
    from .fitting import posed_splats
    from .io import save_camera, save_guidance, save_keypoints, save_params, write_json
    from .raster import splat_gaussians, write_png
    from .synthetic import default_camera, head_hand_groups, make_sequence, perturb
    from .tracker import guidance_from_params

    model = _load_model(args.model)
    if args.frames < 1:
        raise InvalidArgument("--frames must be >= 1")
    out = _out_dir(args.out)
    cam = default_camera(width=args.size, height=args.size)
    seq = make_sequence(model, args.frames, seed=args.seed, noise_px=args.noise, camera=cam)
    save_keypoints(seq.observations, run.output(out / "keypoints.json"))
    save_params(run.output(out / "truth.json"), seq.params, seq.cameras)
    save_params(run.output(out / "init.json"), perturb(seq.params, seed=args.seed + 1), seq.cameras)
    save_camera(run.output(out / "camera.json"), cam)
    guidance = guidance_from_params(model, seq.params, seq.cameras, head_hand_groups(model))
    save_guidance(guidance, run.output(out / "guidance.json"))
    if args.avatar:
        avatar = load_avatar(_require_file(args.avatar, "avatar"))
        frames = []
        for f, p in enumerate(seq.params):
            with torch.no_grad():
                img = splat_gaussians(posed_splats(model, avatar, p), cam).rgb
            name = f"frame_{f:03d}.png"
            write_png(img, run.output(out / name))
            frames.append({"image": name, "camera": "camera.json", "params": "truth.json", "params_frame": f})
        write_json(run.output(out / "scene.json"), {"format": "ehm-scene", "frames": frames})
    run.metrics.update(frames=args.frames, noise_px=args.noise)


def _tracking_config(args):
    from .io import read_json
    from .tracker import TrackingConfig

    d = read_json(_require_file(args.config, "config")) if args.config else {}
    try:
        cfg = TrackingConfig.from_dict(d)
    except TypeError as exc:
        raise InvalidArgument(f"bad tracking config: {exc}") from exc
    for stage in ("face", "eye", "body"):
        value = getattr(args, f"{stage}_iterations")
        if value is not None:
            cfg = replace(cfg, **{f"{stage}_iterations": value})
    return cfg


def cmd_track(args, run: Run) -> None:
    from .io import load_cameras, load_guidance, load_keypoints, load_params, save_params, write_stage_histories
    from .synthetic import default_camera
    from .tracker import observation_rmse, track, zero_init

    model = _load_model(args.model)
    obs = load_keypoints(_require_file(args.keypoints, "keypoint file"), model)
    if len(obs) == 0:
        raise InvalidArgument("keypoint file has no frames")
    cfg = _tracking_config(args)
    cams = None
    if args.init:
        init, cams = load_params(_require_file(args.init, "init file"), model)
        if len(init) != len(obs):
            raise InvalidArgument(f"init has {len(init)} frames, keypoints have {len(obs)}")
    else:
        init = zero_init(model, len(obs))
    if args.camera:
        cams = load_cameras(_require_file(args.camera, "camera file"))
    if cams is None:
        cams = [default_camera()]
    if len(cams) == 1:
        cams = cams * len(obs)
    if len(cams) != len(obs):
        raise InvalidArgument(f"{len(cams)} cameras for {len(obs)} frames")
    guidance = load_guidance(_require_file(args.guidance, "guidance file")) if args.guidance else None

    res = track(model, obs, init, cams, cfg, guidance)
    out = _out_dir(args.out)
    rmse = observation_rmse(model, obs, res.params, res.cameras)
    stages = {"face": res.face, "eye": res.eye, "body": res.body}
    summary = {name: {"status": s.status, "loss": s.breakdown, "rmse_px": s.rmse} for name, s in stages.items()}
    save_params(run.output(out / "params.json"), res.params, res.cameras,
                {"config": cfg.to_dict(), "stages": summary, "reprojection_rmse_px": rmse})
    write_stage_histories(run.output(out / "history.csv"), {n: s.history for n, s in stages.items()})
    run.metrics.update(reprojection_rmse_px=rmse, stages=summary)
    print(f"reprojection RMSE {rmse:.4f} px over {len(obs)} frames")


def _frame_params(args, model):
    from .io import load_cameras, load_params

    params, cams = load_params(_require_file(args.params, "params file"), model)
    if not 0 <= args.frame < len(params):
        raise InvalidArgument(f"--frame {args.frame} outside 0..{len(params) - 1}")
    if args.camera:
        cams = load_cameras(_require_file(args.camera, "camera file"))
    cam = None
    if cams:
        cam = cams[args.frame] if len(cams) > 1 else cams[0]
    return params[args.frame], cam


def cmd_animate(args, run: Run) -> None:
    from .avatar import load_avatar, write_ply
    from .fitting import posed_splats
    from .raster import splat_gaussians, write_png, write_raw

    model = _load_model(args.model)
    avatar = load_avatar(_require_file(args.avatar, "avatar"))
    params, cam = _frame_params(args, model)
    with torch.no_grad():
        splats = posed_splats(model, avatar, params)
        write_ply(splats, run.output(args.out_ply))
        run.metrics.update(splats=len(splats), inactive=len(avatar.template) + len(avatar.uv) - len(splats))
        if args.out_png or args.out_raw:
            if cam is None:
                raise InvalidArgument("rendering needs a camera (--camera or cameras in the params file)")
            target = splat_gaussians(splats, cam)
            if args.out_png:
                write_png(target.rgb, run.output(args.out_png))
            if args.out_raw:
                write_raw(target, run.output(args.out_raw))
                run.output(str(args.out_raw) + ".json")


def cmd_bake_uv(args, run: Run) -> None:
    from .io import write_json
    from .model import evaluate_ehm
    from .raster import rasterize_visibility, read_image
    from .uvmap import build_uv_lookup, inverse_texture_map, write_feature_stack

    model = _load_model(args.model)
    params, cam = _frame_params(args, model)
    if cam is None:
        raise InvalidArgument("baking needs a camera (--camera or cameras in the params file)")
    features = read_image(_require_file(args.feature_image, "feature image"))
    if tuple(features.shape[:2]) != (cam.height, cam.width):
        raise InvalidArgument(f"feature image is {features.shape[1]}x{features.shape[0]}, camera is "
                              f"{cam.width}x{cam.height}")
    with torch.no_grad():
        posed = evaluate_ehm(model, params, with_rotations=False).vertices
        vis = rasterize_visibility(posed, model.faces, cam)
        lookup = build_uv_lookup(model, args.atlas, args.atlas)
        fuv, stats = inverse_texture_map(features, posed, lookup, cam, vis.visible)
    out = _out_dir(args.out)
    sidecar = write_feature_stack(fuv, out, extra={"source": Path(args.feature_image).name})
    run.output(sidecar)
    for ch in json.loads(sidecar.read_text())["channels"]:
        run.output(out / ch["file"])
    raw = run.output(out / "fuv.f32")
    raw.write_bytes(fuv.numpy().astype("<f4").tobytes())
    write_json(run.output(out / "fuv.f32.json"), {"height": args.atlas, "width": args.atlas,
                                                   "channels": int(fuv.shape[2]), "dtype": "float32-le",
                                                   "layout": "row-major HxWxC"})
    coverage = dict(stats.to_dict(), texels=args.atlas * args.atlas,
                    coverage=stats.written / stats.assigned if stats.assigned else 0.0,
                    visible_triangles=int(vis.visible.sum()), triangles=model.num_faces)
    write_json(run.output(out / "coverage.json"), coverage)
    run.metrics.update(coverage)


def cmd_fit(args, run: Run) -> None:
    from .avatar import load_avatar, save_avatar, write_ply
    from .fitting import FitConfig, fit, mean_abs_error
    from .io import load_scene, read_json, write_history_csv, write_json

    model = _load_model(args.model) if args.model else None
    frames, avatar_path = load_scene(_require_file(args.scene, "scene"), model)
    if args.init_avatar:
        avatar_path = Path(args.init_avatar)
    if avatar_path is None:
        raise InvalidArgument("no initial avatar (scene 'avatar' entry or --init-avatar)")
    init = load_avatar(_require_file(avatar_path, "avatar"))
    d = read_json(_require_file(args.config, "config")) if args.config else {}
    try:
        cfg = FitConfig.from_dict(d)
    except TypeError as exc:
        raise InvalidArgument(f"bad fit config: {exc}") from exc
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    res = fit(frames, model, init, cfg)
    out = _out_dir(args.out)
    save_avatar(res.avatar, run.output(out / "avatar.zip"))
    write_history_csv(run.output(out / "loss.csv"), res.history)
    write_ply(res.avatar.template, run.output(out / "template.ply"))
    l1 = mean_abs_error(model, res.avatar, frames)
    write_json(run.output(out / "fit.json"), {"config": cfg.to_dict(), "breakdown": res.breakdown,
                                              "mean_abs_error": l1, "iterations": cfg.iterations})
    run.metrics.update(breakdown=res.breakdown, mean_abs_error=l1)
    print(f"final loss {res.breakdown['total']:.6f}, per-pixel L1 {l1:.6f}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-frame evaluation (default 1)")
    common.add_argument("--seed", type=int, default=0, help="seed for every stochastic choice (default 0)")
    common.add_argument("--json-report", metavar="PATH", help="write a machine-readable run report")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    p = argparse.ArgumentParser(prog="ehmavatar", description="Expressive template model and Gaussian avatar tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("make-toy", parents=[common], help="generate the synthetic template model")
    s.add_argument("--vertices", type=int, default=400, help="vertex count (default 400, ours)")
    s.add_argument("--joints", type=int, default=12, help="joint count (default 12, ours)")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--avatar", help="also write a neutral avatar (template + UV splats) here")
    s.add_argument("--atlas", type=int, default=32, help="UV atlas size for the avatar's UV splats (default 32, ours)")
    s.add_argument("--latent", type=int, default=32, help="latent feature channels (default 32, ours)")
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("synth", parents=[common], help="synthesize a keypoint sequence with known parameters")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", type=int, default=8, help="frame count (default 8, ours)")
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian keypoint noise in pixels (default 0, ours)")
    s.add_argument("--size", type=int, default=512, help="image size in pixels (default 512, ours)")
    s.add_argument("--avatar", help="render this avatar per frame and write a fit scene")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("track", parents=[common], help="fit per-frame parameters to 2D keypoints")
    s.add_argument("--model", required=True)
    s.add_argument("--keypoints", required=True)
    s.add_argument("--init", help="coarse initial parameters (default: zero parameters)")
    s.add_argument("--camera", help="camera JSON (default: cameras in --init, else a fixed default camera, ours)")
    s.add_argument("--guidance", help="3D guidance meshes for the body stage")
    s.add_argument("--config", help="tracking config JSON; face 1000 / eye 500 iterations by default, "
                                    "other defaults ours")
    s.add_argument("--face-iterations", type=int, help="override the face-stage iteration count")
    s.add_argument("--eye-iterations", type=int, help="override the eye-stage iteration count")
    s.add_argument("--body-iterations", type=int, help="override the body-stage iteration count (default 1000, ours)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("animate", parents=[common], help="pose an avatar and export splats / a render")
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--frame", type=int, default=0, help="frame of the params file (default 0)")
    s.add_argument("--avatar", required=True)
    s.add_argument("--camera", help="camera JSON (default: cameras in the params file)")
    s.add_argument("--out-ply", required=True)
    s.add_argument("--out-png", help="render the coarse RGB image here")
    s.add_argument("--out-raw", help="dump the full feature render (float32) here")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("bake-uv", parents=[common], help="inverse-map a screen-space feature image into UV space")
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--frame", type=int, default=0, help="frame of the params file (default 0)")
    s.add_argument("--camera", help="camera JSON (default: cameras in the params file)")
    s.add_argument("--feature-image", required=True, help="PNG, or .npy holding an (H, W, C) array")
    s.add_argument("--atlas", type=int, default=256, help="UV atlas size (default 256, ours)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_bake_uv)

    s = sub.add_parser("fit", parents=[common], help="optimize avatar splats against target images")
    s.add_argument("--scene", required=True)
    s.add_argument("--model", help="template model (omit to fit static world-space splats)")
    s.add_argument("--config", help="fit config JSON (loss weights and thresholds default to the original method's "
                                    "values; iterations 2000 and step size 1e-2 are ours)")
    s.add_argument("--init-avatar", help="initial avatar (default: the scene's 'avatar' entry)")
    s.add_argument("--iterations", type=int, help="override the iteration count")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command)
    code, status, message = EXIT_OK, "ok", None
    try:
        if args.threads < 1:
            raise InvalidArgument("--threads must be >= 1")
        set_threads(args.threads)
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
        args.func(args, run)
    except OptimizationFailure as exc:
        code, status, message = EXIT_NUMERIC, "numerical-failure", str(exc)
    except (AvatarError, OSError) as exc:
        code, status, message = EXIT_INPUT, "input-error", str(exc)
    if message:
        print(f"ehmavatar {args.command}: {message}", file=sys.stderr)
    if args.json_report:
        Path(args.json_report).write_text(json.dumps(run.report(status, code, message), indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
