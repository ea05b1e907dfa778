"""Operator entry points: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage error (bad flags or flag/data combinations
detected before processing), 1 data error (unreadable or inconsistent
inputs, diverged runs). Diagnostics go to stderr; data goes to files or
stdout only. Flags override manifest values which override defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import fileio
from .fileio import CameraCalibration, FormatError, load_checkpoint, save_checkpoint
from .manifest import (ManifestError, load_manifest, read_listener_poses)
from .objective import BilateralGrid
from .raster import CameraModel, RasterOptions, rasterize
from .scene import SplatSet
from .seeding import InitConfig, initialize_from_manifest
from .soundfield import (binauralize, identity_hrirs, load_hrir_manifest,
                         triangulate_source)
from .train import (TrainConfig, TrainingDiverged, calibrate_offsets_only,
                    evaluate_holdout, load_train_state, save_train_state,
                    train)


class UsageError(Exception):
    """Flag-level problem found after argparse (maps to exit code 2)."""


def _fail(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_scene(manifest_path: str):
    manifest = load_manifest(manifest_path)
    return manifest, manifest.load_cameras()


def _apply_checkpoint(cameras: list[CameraModel], path: str) -> SplatSet:
    """Attach stored offsets and grids to the manifest's cameras."""
    ckpt = load_checkpoint(path)
    by_id = {c.cam_id: c for c in cameras}
    for cam_id, cal in ckpt.calibrations.items():
        if cam_id not in by_id:
            raise FormatError(
                f"checkpoint calibrates unknown camera {cam_id!r}")
        by_id[cam_id].delta_gamma = cal.delta_gamma
        by_id[cam_id].color_grid = cal.grid
    return ckpt.splats


def _calibrations_from(cameras: list[CameraModel]) -> dict[str, CameraCalibration]:
    out = {}
    for cam in cameras:
        grid = cam.color_grid if cam.color_grid is not None \
            else BilateralGrid.identity(cam_id=cam.cam_id)
        out[cam.cam_id] = CameraCalibration(
            cam_id=cam.cam_id, delta_gamma=cam.delta_gamma, grid=grid)
    return out


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from . import synth
    if args.kind == "scene":
        scene = synth.preset_scene(
            args.out, seed=args.seed, num_cameras=args.cameras,
            image_size=args.size, num_frames=args.frames, fps=args.fps,
            num_static=args.static, num_dynamic=args.dynamic,
            radius=args.radius, z_height=args.height, threads=args.threads)
    elif args.kind == "calibration":
        scene = synth.preset_calibration(
            args.out, seed=args.seed, num_cameras=args.cameras,
            num_frames=args.frames, fps=args.fps, offset_ms=args.offset_ms,
            pixels_per_frame=args.pixels_per_frame, threads=args.threads)
    else:
        scene = synth.preset_audio(args.out, seed=args.seed)
    print(f"wrote {scene.manifest_path}", file=sys.stderr)
    return 0


def cmd_init(args) -> int:
    manifest, cameras = _load_scene(args.manifest)
    if all(manifest.camera_entry(c.cam_id).flows is None for c in cameras
           if c.cam_id != manifest.held_out_camera):
        raise UsageError("no camera in the manifest declares flow maps; "
                         "initialization needs flow to classify points")
    config = InitConfig(flow_threshold=args.flow_threshold,
                        dynamic_stride=args.stride,
                        sh_degree=args.sh_degree)
    splats, dynamic = initialize_from_manifest(manifest, cameras, config)
    save_checkpoint(args.out, splats, _calibrations_from(cameras))
    print(f"classified {int(dynamic.sum())} of {dynamic.size} "
          f"reconstruction points as dynamic", file=sys.stderr)
    print(f"seeded {splats.count} splats "
          f"({int(splats.is_static.sum())} static) -> {args.out}",
          file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    manifest, cameras = _load_scene(args.manifest)
    splats = _apply_checkpoint(cameras, args.checkpoint)
    config = TrainConfig(
        epochs=args.epochs, seed=args.seed, threads=args.threads,
        pin_camera=args.pin_camera,
        optimize_offsets=not args.no_offsets,
        optimize_grids=not args.no_grids,
        freeze_static_velocity=args.freeze_static_velocity)
    state = None
    if args.resume:
        state = load_train_state(args.resume, cameras)
    if args.calibrate_offsets_only:
        result = calibrate_offsets_only(manifest, splats, cameras, config)
    else:
        result = train(manifest, splats, cameras, config, state=state)
    out = args.out or args.checkpoint
    save_checkpoint(out, result.splats, _calibrations_from(result.cameras))
    if args.save_state:
        save_train_state(args.save_state, result.state)
    if args.log:
        with open(args.log, "w") as fh:
            json.dump(result.log, fh)
    last = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {result.state.step} steps, {result.splats.count} splats, "
          f"last loss {last:.6f} -> {out}", file=sys.stderr)
    return 0


def _parse_channels(spec: str) -> list[str]:
    channels = [c.strip() for c in spec.split(",") if c.strip()]
    bad = [c for c in channels if c not in ("color", "depth", "flow")]
    if bad or not channels:
        raise UsageError(f"unknown channels {bad}; pick from color,depth,flow")
    return channels


def _channel_path(base: str, channel: str) -> str:
    stem = base[:-4] if base.lower().endswith(".png") else base
    if channel == "color":
        return stem + ".png"
    return stem + (".depth.pfm" if channel == "depth" else ".flow.flo")


def _render_to_files(camera: CameraModel, splats: SplatSet, t: float,
                     opts: RasterOptions, channels: list[str],
                     base: str) -> None:
    out = rasterize(camera, splats, t, opts)
    for channel in channels:
        path = _channel_path(base, channel)
        if channel == "color":
            fileio.write_image(path, np.clip(out.color, 0.0, 1.0))
        elif channel == "depth":
            fileio.write_pfm(path, out.depth)
        else:
            fileio.write_flo(path, out.flow)


def cmd_render(args) -> int:
    manifest, cameras = _load_scene(args.manifest)
    splats = _apply_checkpoint(cameras, args.checkpoint)
    channels = _parse_channels(args.channels)
    opts = RasterOptions(background=manifest.background.copy(),
                         num_frames=manifest.num_frames,
                         threads=args.threads)
    if args.pose_file:
        from .synth import look_at_camera
        template = _pick_camera(cameras, args.camera) if args.camera \
            else cameras[0]
        os.makedirs(args.out, exist_ok=True)
        with open(args.pose_file) as fh:
            lines = [ln.split() for ln in fh
                     if ln.strip() and not ln.startswith("#")]
        for i, parts in enumerate(lines):
            if len(parts) != 7:
                raise FormatError(
                    f"pose line {i}: want 't x y z tx ty tz', got {len(parts)} fields")
            t, *vals = (float(v) for v in parts)
            _check_time(t)
            cam = look_at_camera(
                f"pose{i}", np.array(vals[:3]), np.array(vals[3:]),
                template.width, template.height, template.fx)
            _render_to_files(cam, splats, t, opts, channels,
                             os.path.join(args.out, f"{i:06d}.png"))
        print(f"rendered {len(lines)} poses -> {args.out}", file=sys.stderr)
        return 0
    camera = _pick_camera(cameras, args.camera)
    _check_time(args.time)
    _render_to_files(camera, splats, args.time, opts, channels, args.out)
    print(f"rendered {args.camera} t={args.time} -> {args.out}",
          file=sys.stderr)
    return 0


def _pick_camera(cameras: list[CameraModel], cam_id: str | None) -> CameraModel:
    if cam_id is None:
        raise UsageError("pick a camera with --camera or supply --pose-file")
    for cam in cameras:
        if cam.cam_id == cam_id:
            return cam
    raise UsageError(f"camera {cam_id!r} is not in the manifest")


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"time {t} outside the clip range [0, 1]")


def cmd_eval(args) -> int:
    manifest, cameras = _load_scene(args.manifest)
    splats = _apply_checkpoint(cameras, args.checkpoint)
    rows = evaluate_holdout(manifest, splats, cameras, threads=args.threads)
    json.dump({"held_out_camera": manifest.held_out_camera, "rows": rows},
              sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def cmd_sonify(args) -> int:
    manifest, cameras = _load_scene(args.manifest)
    if manifest.audio_file is None:
        raise UsageError("manifest has no audio section; nothing to sonify")
    audio = manifest.load_audio()
    keypoints = manifest.load_keypoints()
    source = triangulate_source(keypoints, cameras, manifest.num_frames,
                                manifest.mic_camera)
    poses = read_listener_poses(args.listener_poses)
    if args.hrir_manifest:
        hrirs = load_hrir_manifest(args.hrir_manifest)
    elif manifest.hrir_manifest is not None:
        hrirs = manifest.load_hrirs()
    else:
        hrirs = identity_hrirs(audio.sample_rate)
    stereo = binauralize(audio, source, poses, hrirs)
    fileio.write_wav(args.out, stereo.samples, stereo.sample_rate)
    print(f"wrote {stereo.samples.shape[0]} stereo samples at "
          f"{stereo.sample_rate} Hz -> {args.out}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    from .serve import RenderService
    manifest, cameras = _load_scene(args.manifest)
    splats = _apply_checkpoint(cameras, args.checkpoint)
    service = RenderService(manifest, splats, cameras,
                            host=args.host, port=args.port,
                            threads=args.threads)
    print(f"serving on {args.host}:{service.port}", file=sys.stderr)
    try:
        service.run_forever()
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
    finally:
        service.close()
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volvid",
        description="volumetric video reconstruction and playback")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("scene", "calibration", "audio"),
                   default="scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--static", type=int, default=110)
    p.add_argument("--dynamic", type=int, default=6)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--height", type=float, default=3.0)
    p.add_argument("--offset-ms", type=float, default=8.0)
    p.add_argument("--pixels-per-frame", type=float, default=2.0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="seed splats from a scene manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--flow-threshold", type=float, default=0.1)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="optimize splats against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None,
                   help="output checkpoint (default: overwrite --checkpoint)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--pin-camera", default=None,
                   help="hold this camera's time offset at zero")
    p.add_argument("--no-offsets", action="store_true",
                   help="freeze per-camera time offsets")
    p.add_argument("--no-grids", action="store_true",
                   help="freeze per-camera color grids")
    p.add_argument("--freeze-static-velocity", action="store_true")
    p.add_argument("--calibrate-offsets-only", action="store_true",
                   help="fit only time offsets against frozen splats")
    p.add_argument("--resume", default=None,
                   help="optimizer state file from --save-state")
    p.add_argument("--save-state", default=None)
    p.add_argument("--log", default=None, help="write per-step losses (JSON)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", default=None)
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("--channels", default="color")
    p.add_argument("--pose-file", default=None,
                   help="lines 't x y z tx ty tz'; renders one frame each")
    p.add_argument("--out", required=True,
                   help="image path, or directory with --pose-file")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM on the held-out camera")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sonify", help="binaural audio for a listener path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--listener-poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hrir-manifest", default=None,
                   help="override the manifest's HRIR set")
    p.set_defaults(func=cmd_sonify)

    p = sub.add_parser("serve", help="stream rendered frames over a socket")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0,
                   help="0 picks a free port (printed on stderr)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _fail(str(exc))
        return 2
    except (ManifestError, FormatError, TrainingDiverged) as exc:
        _fail(str(exc))
        return 1
    except (OSError, ValueError) as exc:
        _fail(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
