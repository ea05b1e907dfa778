"""Flow-guided initialization of the primitive set.

Reconstruction points are split into static and dynamic by probing optical
flow magnitude at their projections: a point is dynamic as soon as any view
sees it move. Static points are instantiated once with a huge temporal
window; dynamic points are instantiated per frame (optionally strided) with
a one-frame window centered on their frame. This keeps the primitive count
near the static cloud size plus the moving fraction, instead of replicating
everything every frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .objective import bilinear_sample
from .raster import CameraModel
from .scene import SH_C0, SplatSet, frame_duration, frame_time, inverse_sigmoid


@dataclass
class InitConfig:
    flow_threshold: float = 0.1   # px per frame; strictly above means dynamic
    tau_static: float = 2.0
    dynamic_stride: int = 1       # instantiate dynamic clouds every k-th frame
    initial_opacity: float = 0.1
    sh_degree: int = 1
    near: float = 0.01
    min_scale: float = 1.0e-7


def classify_points(points: np.ndarray, cameras: list[CameraModel],
                    flows: dict[str, np.ndarray],
                    config: InitConfig | None = None) -> np.ndarray:
    """Dynamic mask: any in-bounds projection sampling flow above threshold.

    :param points: (M, 3) world positions.
    :param cameras: views whose ids key the flow maps.
    :param flows: per-camera forward flow (H, W, 2) in pixels per frame.
    :return: (M,) bool, True where dynamic.
    """
    config = config or InitConfig()
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    dynamic = np.zeros(m, dtype=bool)
    for cam in cameras:
        if cam.cam_id not in flows:
            continue
        flow = flows[cam.cam_id]
        if flow.shape[0] != cam.height or flow.shape[1] != cam.width:
            raise ValueError(f"flow map for {cam.cam_id} does not match its image size")
        p_cam = points @ cam.rotation.T + cam.translation
        z = p_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = cam.fx * p_cam[:, 0] / z + cam.cx
            y = cam.fy * p_cam[:, 1] / z + cam.cy
        inside = (z > config.near) & (x >= 0) & (x <= cam.width - 1) \
            & (y >= 0) & (y <= cam.height - 1)
        if not inside.any():
            continue
        sampled = bilinear_sample(flow, x[inside], y[inside])
        mag = np.hypot(sampled[:, 0], sampled[:, 1])
        hits = np.zeros(m, dtype=bool)
        hits[inside] = mag > config.flow_threshold
        dynamic |= hits
    return dynamic


def mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors (self excluded)."""
    n = points.shape[0]
    if n <= 1:
        return np.full(n, 0.1)
    kk = min(k, n - 1)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=kk + 1)
    return dist[:, 1:].mean(axis=1)


def _splats_from_cloud(points: np.ndarray, colors: np.ndarray, center: float,
                       extent: float, static: bool, config: InitConfig) -> SplatSet:
    n = points.shape[0]
    basis = (config.sh_degree + 1) ** 2
    sh = np.zeros((n, basis, 3))
    sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    scale = np.maximum(mean_knn_distance(points), config.min_scale)
    return SplatSet(
        position=np.asarray(points, dtype=np.float64).copy(),
        rotation=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scale=np.tile(np.log(scale)[:, None], (1, 3)),
        sh=sh,
        opacity_logit=np.full(n, float(inverse_sigmoid(config.initial_opacity))),
        velocity=np.zeros((n, 3)),
        temporal_center=np.full(n, center),
        temporal_extent=np.full(n, extent),
        is_static=np.full(n, static, dtype=bool),
    )


def build_initial_splats(static_points: np.ndarray, static_colors: np.ndarray,
                         dynamic_frames: list[tuple[int, np.ndarray, np.ndarray]],
                         num_frames: int,
                         config: InitConfig | None = None) -> SplatSet:
    """Assemble the compact initial set.

    :param static_points: (S, 3) positions instantiated once at t=0.
    :param static_colors: (S, 3) rgb in [0, 1].
    :param dynamic_frames: (frame_index, points, colors) per frame; frames
        whose index is not a multiple of dynamic_stride are skipped.
    :param num_frames: sequence length for time normalization.
    """
    config = config or InitConfig()
    if config.dynamic_stride < 1:
        raise ValueError("dynamic_stride must be >= 1")
    parts = []
    if static_points.shape[0]:
        parts.append(_splats_from_cloud(static_points, static_colors, 0.0,
                                        config.tau_static, True, config))
    tau_dyn = frame_duration(num_frames)
    for frame_index, pts, cols in dynamic_frames:
        if frame_index % config.dynamic_stride != 0:
            continue
        if pts.shape[0] == 0:
            continue
        parts.append(_splats_from_cloud(pts, cols, frame_time(frame_index, num_frames),
                                        tau_dyn, False, config))
    if not parts:
        raise ValueError("initialization produced no primitives")
    out = SplatSet.concatenate(parts)
    out.validate()
    return out


def initialize_from_manifest(manifest, cameras: list[CameraModel],
                             config: InitConfig | None = None
                             ) -> tuple[SplatSet, np.ndarray]:
    """Full init pipeline: classify the reconstruction, then seed splats.

    Classification probes every available flow map from every training
    camera (the held-out camera contributes nothing). Per-frame dynamic
    clouds come from the reconstruction when present; otherwise the flagged
    rows of the static cloud stand in at every frame.

    :return: (splats, dynamic_mask over the static reconstruction).
    """
    config = config or InitConfig()
    points, colors = manifest.load_static_points()
    train_cams = [c for c in cameras if c.cam_id != manifest.held_out_camera]
    dynamic = np.zeros(points.shape[0], dtype=bool)
    for k in range(max(manifest.num_frames - 1, 1)):
        flows = {}
        for cam in train_cams:
            entry = manifest.camera_entry(cam.cam_id)
            if entry.flows is None:
                continue
            path = manifest.flow_path(cam.cam_id, k)
            if os.path.exists(path):
                flows[cam.cam_id] = manifest.load_flow(cam.cam_id, k)
        if flows:
            dynamic |= classify_points(points, train_cams, flows, config)
    dynamic_frames: list[tuple[int, np.ndarray, np.ndarray]] = []
    if manifest.has_dynamic_points():
        for k in range(manifest.num_frames):
            pts, cols = manifest.load_dynamic_points(k)
            dynamic_frames.append((k, pts, cols))
    elif dynamic.any():
        for k in range(manifest.num_frames):
            dynamic_frames.append((k, points[dynamic], colors[dynamic]))
    splats = build_initial_splats(points[~dynamic], colors[~dynamic],
                                  dynamic_frames, manifest.num_frames, config)
    return splats, dynamic
