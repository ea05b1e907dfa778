"""Synthetic fixture generation: complete on-disk scenes from known truth.

Everything downstream (initialization, training, calibration recovery,
evaluation, audio synthesis, the render service) can be exercised against
datasets whose ground truth is exact: a hand-built primitive set renders the
images, flows and depths; the reconstruction files hold the true centers;
keypoints are noiseless projections of the true moving source. Generators
are fully seeded.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import fileio
from .manifest import CameraEntry, SceneManifest, load_manifest, save_manifest
from .raster import CameraModel, RasterOptions, rasterize
from .scene import (SH_C0, STATIC_EXTENT_CUTOFF, SplatSet, empty_splats,
                    evaluate_at_time, frame_time, inverse_sigmoid)
from .soundfield import synthesize_hrtf, save_hrir_manifest


@dataclass
class SyntheticScene:
    manifest_path: str
    splats: SplatSet                 # exact truth behind every file on disk
    cameras: list[CameraModel]
    offsets: dict[str, float]        # injected per-camera time offsets
    source_index: int | None = None  # splat acting as the sound source

    @property
    def manifest(self) -> SceneManifest:
        return load_manifest(self.manifest_path)


def look_at_camera(cam_id: str, center: np.ndarray, target: np.ndarray,
                   width: int, height: int, focal: float) -> CameraModel:
    """Camera at ``center`` looking at ``target`` with +z world up."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(center,
                                                                dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraModel(
        cam_id=cam_id, width=width, height=height,
        fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        rotation=rotation, translation=-rotation @ np.asarray(center,
                                                              dtype=np.float64))


def ring_cameras(num_cameras: int, width: int = 64, height: int = 64,
                 focal: float = 70.0, radius: float = 2.5,
                 z_height: float = 0.5,
                 target: np.ndarray | None = None) -> list[CameraModel]:
    target = np.zeros(3) if target is None else target
    cams = []
    for i in range(num_cameras):
        angle = 2.0 * np.pi * i / num_cameras
        center = np.array([radius * np.cos(angle), radius * np.sin(angle),
                           z_height])
        cams.append(look_at_camera(f"cam{i}", center, target, width, height,
                                   focal))
    return cams


def random_scene(rng: np.random.Generator, num_static: int = 40,
                 num_dynamic: int = 6, extent: float = 0.8,
                 sh_degree: int = 1,
                 dynamic_speed: float = 0.5) -> tuple[SplatSet, int]:
    """Ground-truth primitives: a static cloud plus a compact moving cluster.

    The static cloud stays in the half-space x < -0.15*extent while the
    cluster moves within x > 0.3*extent, so with a mostly-overhead rig no
    static point ever projects into moving pixels: flow probing separates
    the two sets exactly. Returns the set and the index of the cluster
    center splat (the designated sound source).
    """
    basis = (sh_degree + 1) ** 2
    n = num_static + num_dynamic
    splats = empty_splats(n, sh_degree=sh_degree)

    static_pos = np.stack([
        rng.uniform(-extent, -0.15 * extent, size=num_static),
        rng.uniform(-extent, extent, size=num_static),
        rng.uniform(-0.3 * extent, 0.3 * extent, size=num_static)], axis=1)
    cluster_center = np.array([0.55 * extent, 0.0, 0.15 * extent])
    dyn_pos = cluster_center + rng.normal(scale=0.06 * extent,
                                          size=(num_dynamic, 3))

    splats.position[:num_static] = static_pos
    splats.position[num_static:] = dyn_pos
    quats = rng.normal(size=(n, 4))
    splats.rotation[:] = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    splats.log_scale[:] = np.log(rng.uniform(0.05, 0.11, size=(n, 3)))
    splats.opacity_logit[:] = inverse_sigmoid(rng.uniform(0.88, 0.97, size=n))
    rgb = rng.uniform(0.15, 0.85, size=(n, 3))
    splats.sh[:, 0, :] = (rgb - 0.5) / SH_C0
    if basis > 1:
        splats.sh[:, 1:, :] = rng.normal(scale=0.02, size=(n, basis - 1, 3))

    splats.is_static[:num_static] = True
    splats.is_static[num_static:] = False
    splats.temporal_extent[:num_static] = STATIC_EXTENT_CUTOFF * 10
    splats.temporal_center[num_static:] = 0.5
    splats.temporal_extent[num_static:] = 0.8
    # sweep mostly along y so the cluster keeps clear of the static half
    direction = np.array([0.0, 1.0, 0.3]) + rng.normal(scale=0.05, size=3)
    direction[0] = abs(direction[0]) * 0.2
    direction /= np.linalg.norm(direction)
    splats.velocity[num_static:] = direction * extent * dynamic_speed \
        + rng.normal(scale=0.015 * extent, size=(num_dynamic, 3))
    splats.validate()
    return splats, num_static


def _write_sfm(out_dir: str, splats: SplatSet,
               num_frames: int, cameras: list[CameraModel]) -> dict[str, str]:
    os.makedirs(os.path.join(out_dir, "sfm"), exist_ok=True)
    cam_entries = {}
    img_entries = {}
    for i, cam in enumerate(cameras, start=1):
        cam_entries[i] = fileio.ColmapCamera(
            camera_id=i, model="PINHOLE", width=cam.width, height=cam.height,
            params=np.array([cam.fx, cam.fy, cam.cx, cam.cy]))
        img_entries[i] = fileio.ColmapImage(
            image_id=i, qvec=fileio.rotation_to_qvec(cam.rotation),
            tvec=cam.translation.copy(), camera_id=i, name=cam.cam_id,
            xys=np.zeros((0, 2)), point3d_ids=np.zeros(0, dtype=np.int64))
    fileio.write_colmap_cameras(os.path.join(out_dir, "sfm", "cameras.txt"),
                                cam_entries)
    fileio.write_colmap_images(os.path.join(out_dir, "sfm", "images.txt"),
                               img_entries)

    rgb = np.clip(0.5 + SH_C0 * splats.sh[:, 0, :], 0.0, 1.0)
    static_idx = np.flatnonzero(splats.is_static)
    static_pts = {}
    for j, idx in enumerate(static_idx, start=1):
        static_pts[j] = fileio.ColmapPoint(
            point_id=j, xyz=splats.position[idx].copy(),
            rgb=np.round(rgb[idx] * 255).astype(np.uint8), error=0.0, track=[])
    fileio.write_colmap_points(os.path.join(out_dir, "sfm", "points3D.txt"),
                               static_pts)

    dyn_idx = np.flatnonzero(~splats.is_static)
    os.makedirs(os.path.join(out_dir, "sfm", "dynamic"), exist_ok=True)
    for k in range(num_frames):
        t = frame_time(k, num_frames)
        pts = {}
        for j, idx in enumerate(dyn_idx, start=1):
            pos = splats.position[idx] + splats.velocity[idx] \
                * (t - splats.temporal_center[idx])
            pts[j] = fileio.ColmapPoint(
                point_id=j, xyz=pos, rgb=np.round(rgb[idx] * 255).astype(np.uint8),
                error=0.0, track=[])
        fileio.write_colmap_points(
            os.path.join(out_dir, "sfm", "dynamic", f"{k:06d}.txt"), pts)
    return {"cameras": "sfm/cameras.txt", "images": "sfm/images.txt",
            "points": "sfm/points3D.txt",
            "dynamic_points": "sfm/dynamic/{frame:06d}.txt"}


def write_dataset(out_dir: str, splats: SplatSet, cameras: list[CameraModel],
                  num_frames: int, fps: float,
                  background: np.ndarray | None = None,
                  held_out: str | None = None,
                  offsets: dict[str, float] | None = None,
                  source_index: int | None = None,
                  mic_camera: str | None = None,
                  rng: np.random.Generator | None = None,
                  depth_affine: tuple[float, float] = (0.5, 0.1),
                  audio_rate: int = 48000,
                  name: str = "synthetic",
                  threads: int = 1) -> SyntheticScene:
    """Render the truth to a complete dataset directory and manifest.

    ``offsets`` shifts each camera's sampling clock (normalized time) when
    rendering its images, simulating unsynchronized shutters. The stored
    flow for frame k is the forward field k -> k+1; depth maps are written
    through the inverse affine map in ``depth_affine`` so alignment has real
    work to do.
    """
    rng = rng or np.random.default_rng(0)
    background = np.zeros(3) if background is None else np.asarray(background)
    offsets = offsets or {}
    os.makedirs(out_dir, exist_ok=True)
    opts = RasterOptions(background=background, num_frames=num_frames,
                         threads=threads)
    scale, shift = depth_affine

    entries = []
    for cam in cameras:
        base = os.path.join("data", cam.cam_id)
        for sub in ("images", "flows", "depths"):
            os.makedirs(os.path.join(out_dir, base, sub), exist_ok=True)
        entries.append(CameraEntry(
            cam_id=cam.cam_id, images=f"{base}/images",
            flows=f"{base}/flows", depths=f"{base}/depths"))
        for k in range(num_frames):
            t = frame_time(k, num_frames) + offsets.get(cam.cam_id, 0.0)
            out = rasterize(cam, splats, t, opts)
            fileio.write_image(
                os.path.join(out_dir, base, "images", f"{k:06d}.png"), out.color)
            if k < num_frames - 1:  # forward flow k -> k+1; none for the last
                fileio.write_flo(
                    os.path.join(out_dir, base, "flows", f"{k:06d}.flo"), out.flow)
            fileio.write_pfm(
                os.path.join(out_dir, base, "depths", f"{k:06d}.pfm"),
                scale * out.depth + shift)

    sfm_paths = _write_sfm(out_dir, splats, num_frames, cameras)

    held_out = held_out or cameras[-1].cam_id
    audio_file = audio_keypoints = hrir_rel = None
    if source_index is not None:
        mic_camera = mic_camera or cameras[0].cam_id
        os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
        duration = max(num_frames / fps, 1.0)
        mono = rng.uniform(-0.5, 0.5, size=int(round(duration * audio_rate)))
        fileio.write_wav(os.path.join(out_dir, "audio", "mono.wav"), mono,
                         audio_rate, "float32")
        audio_file = "audio/mono.wav"

        keypoints = {}
        one = splats.take(np.array([source_index]))
        for k in range(num_frames):
            pos = evaluate_at_time(one, frame_time(k, num_frames)).position_t[0]
            for cam in cameras:
                p_cam = cam.rotation @ pos + cam.translation
                if p_cam[2] <= 0.01:
                    continue
                x = cam.fx * p_cam[0] / p_cam[2] + cam.cx
                y = cam.fy * p_cam[1] / p_cam[2] + cam.cy
                if 0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1:
                    keypoints[(cam.cam_id, k)] = (float(x), float(y))
        fileio.write_keypoints(os.path.join(out_dir, "audio", "keypoints.txt"),
                               keypoints)
        audio_keypoints = "audio/keypoints.txt"

        hrirs = synthesize_hrtf(np.arange(-180.0, 181.0, 30.0), audio_rate)
        save_hrir_manifest(os.path.join(out_dir, "hrir"), hrirs)
        hrir_rel = "hrir/manifest.txt"

    manifest = SceneManifest(
        root=out_dir, name=name, fps=float(fps), num_frames=num_frames,
        background=background, held_out_camera=held_out,
        sfm_cameras=sfm_paths["cameras"], sfm_images=sfm_paths["images"],
        sfm_points=sfm_paths["points"], cameras=entries,
        sfm_dynamic_points=sfm_paths["dynamic_points"],
        audio_file=audio_file, mic_camera=mic_camera,
        audio_keypoints=audio_keypoints, hrir_manifest=hrir_rel)
    manifest_path = os.path.join(out_dir, "manifest.yaml")
    save_manifest(manifest_path, manifest)
    with open(os.path.join(out_dir, "truth.json"), "w") as fh:
        json.dump({"offsets": {k: float(v) for k, v in offsets.items()},
                   "num_splats": int(splats.count),
                   "source_index": source_index}, fh, indent=1)
    return SyntheticScene(
        manifest_path=manifest_path, splats=splats, cameras=cameras,
        offsets=dict(offsets),
        source_index=source_index)


# ------------------------------------------------------------------ presets

def preset_scene(out_dir: str, seed: int = 0, num_cameras: int = 8,
                 image_size: int = 64, num_frames: int = 6,
                 fps: float = 30.0, num_static: int = 110,
                 num_dynamic: int = 6, radius: float = 1.0,
                 z_height: float = 3.0, threads: int = 1) -> SyntheticScene:
    """General-purpose trainable scene with audio, no injected offsets.

    The rig hovers well above the scene so rays are near-vertical and the
    static/dynamic ground-plane gap survives projection into every view.
    """
    rng = np.random.default_rng(seed)
    splats, num_static_actual = random_scene(rng, num_static=num_static,
                                             num_dynamic=num_dynamic)
    cams = ring_cameras(num_cameras, width=image_size, height=image_size,
                        focal=1.35 * image_size, radius=radius,
                        z_height=z_height)
    return write_dataset(out_dir, splats, cams, num_frames,
                         fps, held_out=cams[-1].cam_id,
                         source_index=num_static_actual,
                         mic_camera=cams[0].cam_id, rng=rng, threads=threads)


def preset_calibration(out_dir: str, seed: int = 0, num_cameras: int = 8,
                       num_frames: int = 60, fps: float = 60.0,
                       offset_ms: float = 8.0, pixels_per_frame: float = 2.0,
                       threads: int = 1) -> SyntheticScene:
    """Unsynchronized rig: a target crossing the views at a known speed.

    Per-camera clock offsets are drawn uniformly in +-offset_ms and injected
    into the rendered images; the first camera's offset is exactly zero so
    recovered offsets share the truth's gauge.
    """
    rng = np.random.default_rng(seed)
    width, height, focal, radius = 160, 120, 100.0, 2.5
    cams = ring_cameras(num_cameras, width=width, height=height, focal=focal,
                        radius=radius)

    # exactly one sharp bright marker crossing at the target screen rate:
    # every covered pixel carries timing signal, so the image quantization
    # floor stays far below the misalignment loss
    duration_frames = num_frames - 1
    world_speed = pixels_per_frame * duration_frames * radius / focal
    splats = empty_splats(1, sh_degree=1)
    mover = 0
    splats.position[mover] = np.array([0.0, 0.0, 0.25])
    splats.velocity[mover] = np.array([0.0, 1.0, 0.0]) * world_speed
    splats.temporal_center[mover] = 0.5
    splats.temporal_extent[mover] = 3.0
    splats.log_scale[mover] = np.log(0.075)
    splats.opacity_logit[mover] = inverse_sigmoid(0.97)
    splats.is_static[mover] = False
    splats.sh[mover, 0, :] = (np.array([0.95, 0.90, 0.85]) - 0.5) / SH_C0
    # recenter so the crossing stays in all views over t in [0, 1]
    splats.position[mover] -= splats.velocity[mover] * 0.5
    splats.validate()

    duration_s = duration_frames / fps
    offsets = {}
    for i, cam in enumerate(cams):
        if i == 0:
            offsets[cam.cam_id] = 0.0  # gauge anchor
        else:
            offsets[cam.cam_id] = float(
                rng.uniform(-offset_ms, offset_ms) / 1000.0 / duration_s)
    return write_dataset(out_dir, splats, cams, num_frames, fps,
                         held_out=cams[-1].cam_id, offsets=offsets,
                         source_index=None, rng=rng, threads=threads,
                         name="calibration")


def preset_audio(out_dir: str, seed: int = 0) -> SyntheticScene:
    """Small rig with a prominent moving source for sound-pipeline tests."""
    rng = np.random.default_rng(seed)
    splats, num_static = random_scene(rng, num_static=12, num_dynamic=3,
                                      dynamic_speed=0.9)
    cams = ring_cameras(6, width=48, height=48, focal=52.0)
    return write_dataset(out_dir, splats, cams, num_frames=8,
                         fps=24.0, held_out=cams[-1].cam_id,
                         source_index=num_static, mic_camera=cams[0].cam_id,
                         rng=rng, name="audio")
