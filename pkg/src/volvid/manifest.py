"""Scene manifests: one YAML file describing a capture and all its priors.

A manifest points at the sparse reconstruction (camera poses, point clouds),
per-camera frame directories (images, forward flow, monocular depth), the
mono audio recording with its tracked source keypoints, and the train/eval
split. All paths are relative to the manifest's directory.

Layout::

    name: demo
    fps: 30.0
    num_frames: 8
    background: [0.0, 0.0, 0.0]
    held_out_camera: cam3
    sfm:
      cameras: sfm/cameras.txt
      images: sfm/images.txt
      points: sfm/points3D.txt
      dynamic_points: "sfm/dynamic/{frame:06d}.txt"   # optional
    cameras:
      - id: cam0
        images: data/cam0/images
        flows: data/cam0/flows          # optional per camera
        depths: data/cam0/depths        # optional per camera
    audio:                              # optional section
      file: audio/mono.wav
      mic_camera: cam1
      keypoints: audio/keypoints.txt
      hrir_manifest: hrir/manifest.txt  # optional

Frame files are named ``{frame:06d}`` with the extension of their format;
the flow stored for frame k is the forward field from frame k to k+1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import fileio
from .raster import CameraModel
from .soundfield import AudioClip, HrirSet, ListenerPose, load_hrir_manifest


class ManifestError(fileio.FormatError):
    """Manifest is malformed or references missing files."""


@dataclass
class CameraEntry:
    cam_id: str
    images: str
    flows: str | None = None
    depths: str | None = None


@dataclass
class SceneManifest:
    root: str
    name: str
    fps: float
    num_frames: int
    background: np.ndarray
    held_out_camera: str
    sfm_cameras: str
    sfm_images: str
    sfm_points: str
    cameras: list[CameraEntry]
    sfm_dynamic_points: str | None = None
    audio_file: str | None = None
    mic_camera: str | None = None
    audio_keypoints: str | None = None
    hrir_manifest: str | None = None

    # ---------------------------------------------------------- paths

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def camera_entry(self, cam_id: str) -> CameraEntry:
        for entry in self.cameras:
            if entry.cam_id == cam_id:
                return entry
        raise ManifestError(f"manifest has no camera {cam_id!r}")

    def image_path(self, cam_id: str, frame: int) -> str:
        return os.path.join(self.resolve(self.camera_entry(cam_id).images),
                            f"{frame:06d}.png")

    def flow_path(self, cam_id: str, frame: int) -> str:
        flows = self.camera_entry(cam_id).flows
        if flows is None:
            raise ManifestError(f"camera {cam_id!r} declares no flow directory")
        return os.path.join(self.resolve(flows), f"{frame:06d}.flo")

    def depth_path(self, cam_id: str, frame: int) -> str:
        depths = self.camera_entry(cam_id).depths
        if depths is None:
            raise ManifestError(f"camera {cam_id!r} declares no depth directory")
        return os.path.join(self.resolve(depths), f"{frame:06d}.pfm")

    # ----------------------------------------------------------- loads

    def load_cameras(self) -> list[CameraModel]:
        """Cameras from the sparse reconstruction, ordered as in the manifest.

        The reconstruction's image NAME column carries the camera id; the
        manifest's camera list must match that set exactly.
        """
        colmap_cams = fileio.read_colmap_cameras(self.resolve(self.sfm_cameras))
        colmap_imgs = fileio.read_colmap_images(self.resolve(self.sfm_images))
        models = {m.cam_id: m
                  for m in fileio.colmap_to_camera_models(colmap_cams, colmap_imgs)}
        wanted = [e.cam_id for e in self.cameras]
        missing = [c for c in wanted if c not in models]
        if missing:
            raise ManifestError(
                f"cameras {missing} not present in the reconstruction")
        extra = sorted(set(models) - set(wanted))
        if extra:
            raise ManifestError(
                f"reconstruction has cameras {extra} missing from the manifest")
        return [models[c] for c in wanted]

    def load_image(self, cam_id: str, frame: int) -> np.ndarray:
        return fileio.read_image(self.image_path(cam_id, frame))

    def load_flow(self, cam_id: str, frame: int) -> np.ndarray:
        return fileio.read_flo(self.flow_path(cam_id, frame))

    def load_depth(self, cam_id: str, frame: int) -> np.ndarray:
        return fileio.read_pfm(self.depth_path(cam_id, frame))

    def load_static_points(self) -> tuple[np.ndarray, np.ndarray]:
        return _points_and_colors(
            fileio.read_colmap_points(self.resolve(self.sfm_points)))

    def has_dynamic_points(self) -> bool:
        return self.sfm_dynamic_points is not None

    def dynamic_points_path(self, frame: int) -> str:
        if self.sfm_dynamic_points is None:
            raise ManifestError("manifest declares no per-frame point clouds")
        return self.resolve(self.sfm_dynamic_points.format(frame=frame))

    def load_dynamic_points(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        return _points_and_colors(
            fileio.read_colmap_points(self.dynamic_points_path(frame)))

    def load_keypoints(self) -> dict[tuple[str, int], tuple[float, float]]:
        if self.audio_keypoints is None:
            raise ManifestError("manifest declares no source keypoints")
        return fileio.read_keypoints(self.resolve(self.audio_keypoints))

    def load_audio(self) -> AudioClip:
        if self.audio_file is None:
            raise ManifestError("manifest declares no audio")
        samples, rate = fileio.read_wav(self.resolve(self.audio_file))
        if samples.shape[1] != 1:
            raise ManifestError("scene audio must be a mono recording")
        return AudioClip(samples=samples[:, 0], sample_rate=rate)

    def load_hrirs(self) -> HrirSet:
        if self.hrir_manifest is None:
            raise ManifestError("manifest declares no impulse-response set")
        return load_hrir_manifest(self.resolve(self.hrir_manifest))

    def sparse_depth_samples(self, camera: CameraModel,
                             near: float = 0.01) -> np.ndarray:
        """(x, y, metric depth) anchors for depth alignment, from the static
        reconstruction, restricted to points that project inside the view."""
        points, _ = self.load_static_points()
        if points.shape[0] == 0:
            return np.zeros((0, 3))
        p_cam = points @ camera.rotation.T + camera.translation
        z = p_cam[:, 2]
        ok = z > near
        x = np.where(ok, p_cam[:, 0] / np.where(ok, z, 1.0), -1.0) * camera.fx \
            + camera.cx
        y = np.where(ok, p_cam[:, 1] / np.where(ok, z, 1.0), -1.0) * camera.fy \
            + camera.cy
        ok &= (x >= 0) & (x <= camera.width - 1) & (y >= 0) & (y <= camera.height - 1)
        return np.stack([x[ok], y[ok], z[ok]], axis=1)


def _points_and_colors(
        points: dict[int, fileio.ColmapPoint]) -> tuple[np.ndarray, np.ndarray]:
    if not points:
        return np.zeros((0, 3)), np.zeros((0, 3))
    ordered = sorted(points.values(), key=lambda p: p.point_id)
    xyz = np.stack([p.xyz for p in ordered]).astype(np.float64)
    rgb = np.stack([p.rgb for p in ordered]).astype(np.float64) / 255.0
    return xyz, rgb


def _want(raw: dict, key: str, kind, what: str):
    if key not in raw:
        raise ManifestError(f"manifest is missing {what} key {key!r}")
    value = raw[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ManifestError(f"manifest key {key!r} must be {kind.__name__}, "
                            f"got {type(value).__name__}")
    return value


def load_manifest(path) -> SceneManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest is not valid yaml: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a mapping at top level")
    root = os.path.dirname(os.path.abspath(path))

    name = _want(raw, "name", str, "scene")
    fps = _want(raw, "fps", float, "scene")
    num_frames = _want(raw, "num_frames", int, "scene")
    if fps <= 0 or num_frames < 1:
        raise ManifestError("fps must be positive and num_frames at least 1")
    background = np.asarray(_want(raw, "background", list, "scene"),
                            dtype=np.float64)
    if background.shape != (3,):
        raise ManifestError("background must be three numbers")
    held_out = _want(raw, "held_out_camera", str, "scene")

    sfm = _want(raw, "sfm", dict, "scene")
    sfm_cameras = _want(sfm, "cameras", str, "sfm")
    sfm_images = _want(sfm, "images", str, "sfm")
    sfm_points = _want(sfm, "points", str, "sfm")
    dynamic = sfm.get("dynamic_points")
    if dynamic is not None and "{frame" not in dynamic:
        raise ManifestError("sfm.dynamic_points must contain a {frame} slot")

    cam_raw = _want(raw, "cameras", list, "scene")
    if not cam_raw:
        raise ManifestError("manifest declares no cameras")
    cameras = []
    seen = set()
    for item in cam_raw:
        if not isinstance(item, dict):
            raise ManifestError("each camera entry must be a mapping")
        cam_id = _want(item, "id", str, "camera")
        if cam_id in seen:
            raise ManifestError(f"duplicate camera id {cam_id!r}")
        seen.add(cam_id)
        cameras.append(CameraEntry(
            cam_id=cam_id,
            images=_want(item, "images", str, "camera"),
            flows=item.get("flows"),
            depths=item.get("depths")))
    if held_out not in seen:
        raise ManifestError(f"held_out_camera {held_out!r} is not a declared camera")

    audio_file = mic_camera = audio_keypoints = hrir = None
    if "audio" in raw:
        audio = _want(raw, "audio", dict, "scene")
        audio_file = _want(audio, "file", str, "audio")
        mic_camera = _want(audio, "mic_camera", str, "audio")
        audio_keypoints = _want(audio, "keypoints", str, "audio")
        hrir = audio.get("hrir_manifest")
        if mic_camera not in seen:
            raise ManifestError(f"mic_camera {mic_camera!r} is not a declared camera")

    manifest = SceneManifest(
        root=root, name=name, fps=fps, num_frames=num_frames,
        background=background, held_out_camera=held_out,
        sfm_cameras=sfm_cameras, sfm_images=sfm_images, sfm_points=sfm_points,
        cameras=cameras, sfm_dynamic_points=dynamic,
        audio_file=audio_file, mic_camera=mic_camera,
        audio_keypoints=audio_keypoints, hrir_manifest=hrir)

    for rel in [sfm_cameras, sfm_images, sfm_points,
                audio_file, audio_keypoints, hrir]:
        if rel is not None and not os.path.exists(manifest.resolve(rel)):
            raise ManifestError(f"manifest references missing file {rel!r}")
    for entry in cameras:
        for sub in [entry.images, entry.flows, entry.depths]:
            if sub is not None and not os.path.isdir(manifest.resolve(sub)):
                raise ManifestError(
                    f"camera {entry.cam_id!r} references missing directory {sub!r}")
    return manifest


def save_manifest(path, manifest: SceneManifest) -> None:
    doc: dict = {
        "name": manifest.name,
        "fps": manifest.fps,
        "num_frames": manifest.num_frames,
        "background": [float(v) for v in manifest.background],
        "held_out_camera": manifest.held_out_camera,
        "sfm": {
            "cameras": manifest.sfm_cameras,
            "images": manifest.sfm_images,
            "points": manifest.sfm_points,
        },
        "cameras": [],
    }
    if manifest.sfm_dynamic_points:
        doc["sfm"]["dynamic_points"] = manifest.sfm_dynamic_points
    for entry in manifest.cameras:
        item = {"id": entry.cam_id, "images": entry.images}
        if entry.flows:
            item["flows"] = entry.flows
        if entry.depths:
            item["depths"] = entry.depths
        doc["cameras"].append(item)
    if manifest.audio_file:
        doc["audio"] = {"file": manifest.audio_file,
                        "mic_camera": manifest.mic_camera,
                        "keypoints": manifest.audio_keypoints}
        if manifest.hrir_manifest:
            doc["audio"]["hrir_manifest"] = manifest.hrir_manifest
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


# ----------------------------------------------------- listener pose files

def read_listener_poses(path) -> list[ListenerPose]:
    """Text lines "t x y yaw_radians"; comments with #."""
    poses = []
    for lineno, line in enumerate(fileio._read_text_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise fileio.FormatError(
                f"listener poses line {lineno}: expected 't x y yaw'")
        try:
            t, x, y, yaw = (float(p) for p in parts)
        except ValueError as exc:
            raise fileio.FormatError(
                f"listener poses line {lineno}: {exc}") from exc
        poses.append(ListenerPose(t=t, position=np.array([x, y]), yaw=yaw))
    return poses


def write_listener_poses(path, poses: list[ListenerPose]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t x y yaw_radians\n")
        for p in poses:
            fh.write(f"{float(p.t)!r} {float(p.position[0])!r} "
                     f"{float(p.position[1])!r} {float(p.yaw)!r}\n")
