"""Differentiable software rasterizer for time-evaluated Gaussian splats.

Forward model per camera and time t:
  * effective time t' = t + per-camera offset
  * primitives are drifted/faded to t' (scene.evaluate_at_time)
  * EWA projection: camera-space covariance mapped through the perspective
    Jacobian, plus a fixed 0.3 px^2 isotropic dilation
  * global front-to-back compositing in camera-depth order over 16x16 tiles

Outputs color, alpha-weighted (unnormalized) depth, 2D velocity flow in
pixels per frame, and final transmittance. `rasterize_reference` is a
deliberately independent brute-force implementation with identical contract
(every surviving splat evaluated at every pixel, double precision, no tile
machinery); the two must agree to rendering tolerance.

The backward pass is fully analytic and covers every primitive field, the
per-camera time offset, and the background color.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .scene import (
    InstantSplats,
    SplatSet,
    evaluate_at_time,
    evaluate_time_gradients,
    frame_duration,
    sh_basis,
    sh_basis_gradient,
)

if TYPE_CHECKING:
    from .objective import BilateralGrid

TILE_SIZE = 16
COV_DILATION = 0.3          # px^2 added to both 2D covariance eigenvalues
ALPHA_CLIP = 0.99           # per-splat alpha ceiling
ALPHA_SKIP = 1.0 / 255.0    # contributions below this are skipped
TERMINATION_T = 1.0e-4      # stop compositing once transmittance drops here
CHI2_99_2DOF = 9.210340371976184  # 99% mass radius^2 of a 2D Gaussian


@dataclass
class CameraModel:
    """Pinhole camera with learnable temporal offset and color correction.

    rotation/translation map world points into camera space:
    p_cam = rotation @ p_world + translation. Pixel sample points sit at
    integer coordinates (0..width-1, 0..height-1).
    """

    cam_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)
    delta_gamma: float = 0.0  # normalized-time offset, learnable
    color_grid: "BilateralGrid | None" = None

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def copy(self) -> "CameraModel":
        grid = self.color_grid.copy() if self.color_grid is not None else None
        return CameraModel(
            cam_id=self.cam_id, width=self.width, height=self.height,
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            rotation=self.rotation.copy(), translation=self.translation.copy(),
            delta_gamma=self.delta_gamma, color_grid=grid,
        )


def effective_time(camera: CameraModel, t: float) -> float:
    """Camera-local capture time: nominal time plus the learned offset."""
    return t + camera.delta_gamma


def offset_to_milliseconds(delta_gamma: float, num_frames: int, fps: float) -> float:
    """Convert a normalized-time offset to milliseconds of wall clock."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    duration_s = (num_frames - 1) / fps if num_frames > 1 else 1.0 / fps
    return delta_gamma * duration_s * 1000.0


@dataclass
class RasterOptions:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    num_frames: int = 2      # sets the flow time base (pixels per frame)
    threads: int = 1
    tile_size: int = TILE_SIZE

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.background.shape != (3,):
            raise ValueError("background must be an RGB triple")


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    depth: np.ndarray          # (H, W) alpha-weighted, unnormalized
    flow: np.ndarray           # (H, W, 2) pixels per frame
    transmittance: np.ndarray  # (H, W), 1 where nothing rendered


@dataclass
class RenderGradients:
    """Upstream adjoints for each output channel; None means zero."""

    d_color: np.ndarray | None = None
    d_depth: np.ndarray | None = None
    d_flow: np.ndarray | None = None
    d_transmittance: np.ndarray | None = None


@dataclass
class ParamGradients:
    """Adjoints for every learnable input of rasterize."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    sh: np.ndarray
    opacity_logit: np.ndarray
    velocity: np.ndarray
    temporal_center: np.ndarray
    temporal_extent: np.ndarray
    delta_gamma: float
    background: np.ndarray
    screen_space: np.ndarray   # (N, 2) d loss / d mean2d, densification signal
    visible: np.ndarray        # (N,) splats that touched any tile


@dataclass
class ProjectedSplat:
    """One splat after EWA projection, None-equivalent rows are culled."""

    mean2d: np.ndarray      # (2,) pixel coordinates
    cov2d: np.ndarray       # (3,) upper triangle (a, b, c) of the 2D covariance
    conic: np.ndarray       # (3,) upper triangle of its inverse
    depth: float            # camera-space Z
    extent: np.ndarray      # (2,) bounding half-widths in pixels
    alpha_base: float       # time-faded opacity
    color: np.ndarray       # (3,)
    flow: np.ndarray        # (2,) pixels per frame


def quaternions_to_rotations(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize quaternions (w, x, y, z) and build rotation matrices.

    Returns (rotations (N,3,3), normalized quats (N,4), input norms (N,)).
    """
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm quaternion")
    r = q / norms[:, None]
    w, x, y, z = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot, r, norms


def _cull_radius_sq(alpha_base: np.ndarray) -> np.ndarray:
    """Mahalanobis radius^2 beyond which a splat cannot contribute.

    Conservative union of the 99% mass ellipse and the ellipse where alpha
    falls below the skip threshold, so geometric culling never removes a
    contribution the per-pixel skip rule would have kept.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        r255 = 2.0 * np.log(np.maximum(alpha_base, 1e-300) / ALPHA_SKIP)
    return np.maximum(CHI2_99_2DOF, r255)


@dataclass
class _Projection:
    """Vectorized projection state for the surviving (valid) splats."""

    index: np.ndarray      # (K,) rows into the SplatSet, depth-sorted
    p_cam: np.ndarray      # (K, 3)
    mean2d: np.ndarray     # (K, 2)
    cov2d: np.ndarray      # (K, 3) (a, b, c)
    conic: np.ndarray      # (K, 3)
    extent: np.ndarray     # (K, 2) bbox half-widths in px
    alpha_base: np.ndarray  # (K,)
    color: np.ndarray      # (K, 3) clamped
    color_raw: np.ndarray  # (K, 3) before clamping
    flow: np.ndarray       # (K, 2)
    # chain-rule intermediates
    quat_n: np.ndarray     # (K, 4) normalized quaternions
    quat_norm: np.ndarray  # (K,)
    rot_q: np.ndarray      # (K, 3, 3)
    cov_world: np.ndarray  # (K, 3, 3)
    cov_cam: np.ndarray    # (K, 3, 3)
    dirs: np.ndarray       # (K, 3) unit view directions
    dist: np.ndarray       # (K,)
    basis: np.ndarray      # (K, B) sh basis values
    u_cam: np.ndarray      # (K, 3) velocity rotated into camera space


def _project_valid(camera: CameraModel, splats: SplatSet, instant: InstantSplats,
                   opts: RasterOptions) -> _Projection:
    n = instant.count
    R, T = camera.rotation, camera.translation
    p_cam = instant.position_t @ R.T + T
    z = p_cam[:, 2]
    near_ok = z > opts.near

    # Work only on splats in front of the near plane from here on.
    idx0 = np.nonzero(near_ok)[0]
    pc = p_cam[idx0]
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = np.stack([camera.fx * X / Z + camera.cx,
                       camera.fy * Y / Z + camera.cy], axis=1)

    rot_q, quat_n, quat_norm = quaternions_to_rotations(instant.rotation[idx0])
    scale = np.exp(instant.log_scale[idx0])
    cov_world = np.einsum("nij,nj,nkj->nik", rot_q, scale * scale, rot_q)
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov_world, R)

    fxz = camera.fx / Z
    fyz = camera.fy / Z
    j02 = -camera.fx * X / (Z * Z)
    j12 = -camera.fy * Y / (Z * Z)
    # 2D covariance entries of J Sigma_cam J^T + dilation.
    c00, c01, c02 = cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 0, 2]
    c11, c12, c22 = cov_cam[:, 1, 1], cov_cam[:, 1, 2], cov_cam[:, 2, 2]
    a = fxz * fxz * c00 + 2 * fxz * j02 * c02 + j02 * j02 * c22 + COV_DILATION
    b = fxz * fyz * c01 + fxz * j12 * c02 + j02 * fyz * c12 + j02 * j12 * c22
    c = fyz * fyz * c11 + 2 * fyz * j12 * c12 + j12 * j12 * c22 + COV_DILATION

    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    alpha_base = instant.opacity_t[idx0]
    r2 = _cull_radius_sq(alpha_base)
    extent = np.sqrt(np.maximum(r2, 0.0))[:, None] * np.sqrt(
        np.maximum(np.stack([a, c], axis=1), 0.0))

    inside = (
        (mean2d[:, 0] + extent[:, 0] >= 0.0)
        & (mean2d[:, 0] - extent[:, 0] <= camera.width - 1.0)
        & (mean2d[:, 1] + extent[:, 1] >= 0.0)
        & (mean2d[:, 1] - extent[:, 1] <= camera.height - 1.0)
        & (alpha_base >= ALPHA_SKIP)
    )

    keep = np.nonzero(inside)[0]
    # Global front-to-back order: camera depth ascending, ties by row index.
    order = keep[np.argsort(Z[keep], kind="stable")]
    idx = idx0[order]

    delta = instant.position_t[idx] - camera.center()
    dist = np.linalg.norm(delta, axis=1)
    dist = np.maximum(dist, 1e-12)
    dirs = delta / dist[:, None]
    basis = sh_basis(dirs, splats.sh_degree)
    color_raw = 0.5 + np.einsum("nb,nbc->nc", basis, instant.sh[idx])
    color = np.clip(color_raw, 0.0, 1.0)

    dt_frame = frame_duration(opts.num_frames)
    u_cam = splats.velocity[idx] @ R.T
    Zk = Z[order]
    flow = np.stack([
        (camera.fx / Zk) * u_cam[:, 0] + (-camera.fx * X[order] / (Zk * Zk)) * u_cam[:, 2],
        (camera.fy / Zk) * u_cam[:, 1] + (-camera.fy * Y[order] / (Zk * Zk)) * u_cam[:, 2],
    ], axis=1) * dt_frame

    return _Projection(
        index=idx, p_cam=pc[order], mean2d=mean2d[order],
        cov2d=np.stack([a, b, c], axis=1)[order], conic=conic[order],
        extent=extent[order], alpha_base=alpha_base[order],
        color=color, color_raw=color_raw, flow=flow,
        quat_n=quat_n[order], quat_norm=quat_norm[order], rot_q=rot_q[order],
        cov_world=cov_world[order], cov_cam=cov_cam[order],
        dirs=dirs, dist=dist, basis=basis, u_cam=u_cam,
    )


def project_splat(camera: CameraModel, splats: SplatSet, index: int, t: float,
                  opts: RasterOptions | None = None) -> ProjectedSplat | None:
    """Project one primitive at nominal time t; None when culled."""
    opts = opts or RasterOptions()
    instant = evaluate_at_time(splats, effective_time(camera, t))
    proj = _project_valid(camera, splats, instant, opts)
    where = np.nonzero(proj.index == index)[0]
    if where.size == 0:
        return None
    k = int(where[0])
    return ProjectedSplat(
        mean2d=proj.mean2d[k], cov2d=proj.cov2d[k], conic=proj.conic[k],
        depth=float(proj.p_cam[k, 2]), extent=proj.extent[k],
        alpha_base=float(proj.alpha_base[k]), color=proj.color[k],
        flow=proj.flow[k],
    )


def project_velocity(camera: CameraModel, position: np.ndarray,
                     velocity: np.ndarray, num_frames: int) -> np.ndarray:
    """World velocity to screen flow in pixels per frame at a world point."""
    p_cam = camera.rotation @ position + camera.translation
    X, Y, Z = p_cam
    if Z <= 0:
        raise ValueError("point is behind the camera")
    u = camera.rotation @ velocity
    jac = np.array([
        [camera.fx / Z, 0.0, -camera.fx * X / (Z * Z)],
        [0.0, camera.fy / Z, -camera.fy * Y / (Z * Z)],
    ])
    return jac @ u * frame_duration(num_frames)


@dataclass
class RenderContext:
    """Forward state retained for the analytic backward pass."""

    camera: CameraModel
    splats: SplatSet
    t: float
    t_eff: float
    opts: RasterOptions
    proj: _Projection
    tiles: list[tuple[int, int, np.ndarray]]  # (y0, x0, splat rows)
    transmittance: np.ndarray


def _tile_jobs(camera: CameraModel, proj: _Projection,
               tile: int) -> list[tuple[int, int, np.ndarray]]:
    h, w = camera.height, camera.width
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    if proj.index.size == 0:
        return [(ty * tile, tx * tile, np.empty(0, dtype=np.int64))
                for ty in range(nty) for tx in range(ntx)]
    x0 = np.clip(np.floor((proj.mean2d[:, 0] - proj.extent[:, 0]) / tile).astype(int), 0, ntx - 1)
    x1 = np.clip(np.floor((proj.mean2d[:, 0] + proj.extent[:, 0]) / tile).astype(int), 0, ntx - 1)
    y0 = np.clip(np.floor((proj.mean2d[:, 1] - proj.extent[:, 1]) / tile).astype(int), 0, nty - 1)
    y1 = np.clip(np.floor((proj.mean2d[:, 1] + proj.extent[:, 1]) / tile).astype(int), 0, nty - 1)
    bins: list[list[int]] = [[] for _ in range(ntx * nty)]
    for k in range(proj.index.size):
        for ty in range(y0[k], y1[k] + 1):
            row = ty * ntx
            for tx in range(x0[k], x1[k] + 1):
                bins[row + tx].append(k)
    jobs = []
    for ty in range(nty):
        for tx in range(ntx):
            jobs.append((ty * tile, tx * tile,
                         np.asarray(bins[ty * ntx + tx], dtype=np.int64)))
    return jobs


def _tile_alpha(proj: _Projection, rows: np.ndarray, xs: np.ndarray,
                ys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel alphas for one tile: (alpha, gaussian, clip mask)."""
    mean = proj.mean2d[rows]
    con = proj.conic[rows]
    dx = xs[:, None] - mean[None, :, 0]
    dy = ys[:, None] - mean[None, :, 1]
    power = -0.5 * (con[None, :, 0] * dx * dx
                    + 2.0 * con[None, :, 1] * dx * dy
                    + con[None, :, 2] * dy * dy)
    gauss = np.where(power > 0.0, 0.0, np.exp(np.minimum(power, 0.0)))
    raw = proj.alpha_base[rows][None, :] * gauss
    clipped = raw > ALPHA_CLIP
    alpha = np.where(clipped, ALPHA_CLIP, raw)
    alpha = np.where(alpha < ALPHA_SKIP, 0.0, alpha)
    return alpha, gauss, clipped


def _composite_tile(alpha: np.ndarray):
    """Compositing weights for one tile.

    Returns (weights, T_before, T_final, processed) where weights are the
    per-contribution alpha * T products with termination applied, and
    processed marks contributions that ran before termination.
    """
    p, k = alpha.shape
    if k == 0:
        ones = np.ones(p)
        return np.zeros((p, 0)), np.zeros((p, 0)), ones, np.zeros((p, 0), dtype=bool)
    cp = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((p, 1)), cp[:, :-1]], axis=1)
    processed = t_before >= TERMINATION_T
    weights = alpha * t_before * processed
    below = cp < TERMINATION_T
    any_below = below.any(axis=1)
    first = np.argmax(below, axis=1)
    t_final = np.where(any_below, cp[np.arange(p), first], cp[:, -1])
    return weights, t_before, t_final, processed


def _pixel_grid(y0: int, x0: int, h: int, w: int, tile: int):
    th = min(tile, h - y0)
    tw = min(tile, w - x0)
    ys, xs = np.mgrid[y0:y0 + th, x0:x0 + tw]
    return ys.reshape(-1).astype(np.float64), xs.reshape(-1).astype(np.float64), th, tw


def render_forward(camera: CameraModel, splats: SplatSet, t: float,
                   opts: RasterOptions | None = None) -> tuple[RenderOutput, RenderContext]:
    """Rasterize and retain the state the backward pass needs."""
    opts = opts or RasterOptions()
    splats.validate()
    t_eff = effective_time(camera, t)
    instant = evaluate_at_time(splats, t_eff)
    proj = _project_valid(camera, splats, instant, opts)
    jobs = _tile_jobs(camera, proj, opts.tile_size)

    h, w = camera.height, camera.width
    color = np.empty((h, w, 3))
    depth = np.zeros((h, w))
    flow = np.zeros((h, w, 2))
    trans = np.ones((h, w))
    color[:] = opts.background

    def run(job):
        y0, x0, rows = job
        ys, xs, th, tw = _pixel_grid(y0, x0, h, w, opts.tile_size)
        if rows.size:
            alpha, _, _ = _tile_alpha(proj, rows, xs, ys)
            weights, _, t_final, _ = _composite_tile(alpha)
            csum = weights @ proj.color[rows] + t_final[:, None] * opts.background
            color[y0:y0 + th, x0:x0 + tw] = csum.reshape(th, tw, 3)
            depth[y0:y0 + th, x0:x0 + tw] = (weights @ proj.p_cam[rows, 2]).reshape(th, tw)
            flow[y0:y0 + th, x0:x0 + tw] = (weights @ proj.flow[rows]).reshape(th, tw, 2)
            trans[y0:y0 + th, x0:x0 + tw] = t_final.reshape(th, tw)

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    out = RenderOutput(color=color, depth=depth, flow=flow, transmittance=trans)
    ctx = RenderContext(camera=camera, splats=splats, t=t, t_eff=t_eff,
                        opts=opts, proj=proj, tiles=jobs, transmittance=trans)
    return out, ctx


def rasterize(camera: CameraModel, splats: SplatSet, t: float,
              opts: RasterOptions | None = None) -> RenderOutput:
    """Render color/depth/flow/transmittance at nominal time t."""
    out, _ = render_forward(camera, splats, t, opts)
    return out


def rasterize_reference(camera: CameraModel, splats: SplatSet, t: float,
                        opts: RasterOptions | None = None) -> RenderOutput:
    """Brute-force oracle: per-pixel loops over every surviving splat.

    Shares only the contract with rasterize (projection formulas, skip and
    termination rules), not the implementation: scalar per-splat math, no
    tiles, no bounding boxes, full-image evaluation in double precision.
    """
    opts = opts or RasterOptions()
    splats.validate()
    t_eff = effective_time(camera, t)
    h, w = camera.height, camera.width
    color = np.tile(opts.background, (h, w, 1)).astype(np.float64)
    depth = np.zeros((h, w))
    flow = np.zeros((h, w, 2))
    trans = np.ones((h, w))

    n = splats.count
    if n == 0:
        return RenderOutput(color, depth, flow, trans)

    R, T = camera.rotation, camera.translation
    cam_c = -R.T @ T
    dt_frame = frame_duration(opts.num_frames)
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)

    entries = []
    for i in range(n):
        center = splats.temporal_center[i]
        extent = splats.temporal_extent[i]
        dtc = t_eff - center
        if extent >= 1.0e6:
            fade = 1.0
        else:
            fade = np.exp(-(dtc * dtc) / (extent * extent))
        opac = 1.0 / (1.0 + np.exp(-splats.opacity_logit[i])) * fade
        p_t = splats.position[i] + splats.velocity[i] * dtc
        p_cam = R @ p_t + T
        if p_cam[2] <= opts.near:
            continue
        entries.append((p_cam[2], i, p_t, p_cam, opac))
    entries.sort(key=lambda e: (e[0], e[1]))

    frozen = np.zeros((h, w), dtype=bool)
    for z, i, p_t, p_cam, opac in entries:
        X, Y, Z = p_cam
        mx = camera.fx * X / Z + camera.cx
        my = camera.fy * Y / Z + camera.cy
        q = splats.rotation[i] / np.linalg.norm(splats.rotation[i])
        qw, qx, qy, qz = q
        rot = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
            [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
            [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
        ])
        s2 = np.exp(2.0 * splats.log_scale[i])
        cov_w = rot @ np.diag(s2) @ rot.T
        cov_c = R @ cov_w @ R.T
        jac = np.array([
            [camera.fx / Z, 0.0, -camera.fx * X / (Z * Z)],
            [0.0, camera.fy / Z, -camera.fy * Y / (Z * Z)],
        ])
        cov2 = jac @ cov_c @ jac.T + COV_DILATION * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[0, 1]
        ca = cov2[1, 1] / det
        cb = -cov2[0, 1] / det
        cc = cov2[0, 0] / det

        view = p_t - cam_c
        dnorm = max(np.linalg.norm(view), 1e-12)
        basis = sh_basis((view / dnorm)[None, :], splats.sh_degree)[0]
        col = np.clip(0.5 + basis @ splats.sh[i], 0.0, 1.0)
        u = R @ splats.velocity[i]
        fl = jac @ u * dt_frame

        dx = xs - mx
        dy = ys - my
        power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
        gauss = np.where(power > 0.0, 0.0, np.exp(np.minimum(power, 0.0)))
        alpha = np.minimum(opac * gauss, ALPHA_CLIP)
        alpha = np.where(alpha < ALPHA_SKIP, 0.0, alpha)
        live = ~frozen
        contrib = np.where(live, alpha * trans, 0.0)
        color += contrib[:, :, None] * col[None, None, :]
        depth += contrib * z
        flow += contrib[:, :, None] * fl[None, None, :]
        trans = np.where(live, trans * (1.0 - alpha), trans)
        frozen = frozen | (live & (trans < TERMINATION_T))

    # Background was pre-filled assuming full transmittance; correct it.
    color += (trans - 1.0)[:, :, None] * opts.background
    return RenderOutput(color, depth, flow, trans)


def _quat_rotation_partials(r: np.ndarray) -> np.ndarray:
    """d rotation / d normalized quaternion, shape (K, 4, 3, 3)."""
    k = r.shape[0]
    w, x, y, z = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    zero = np.zeros(k)
    dw = np.stack([
        np.stack([zero, -2 * z, 2 * y], axis=1),
        np.stack([2 * z, zero, -2 * x], axis=1),
        np.stack([-2 * y, 2 * x, zero], axis=1),
    ], axis=1)
    dx = np.stack([
        np.stack([zero, 2 * y, 2 * z], axis=1),
        np.stack([2 * y, -4 * x, -2 * w], axis=1),
        np.stack([2 * z, 2 * w, -4 * x], axis=1),
    ], axis=1)
    dy = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], axis=1),
        np.stack([2 * x, zero, 2 * z], axis=1),
        np.stack([-2 * w, 2 * z, -4 * y], axis=1),
    ], axis=1)
    dz = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], axis=1),
        np.stack([2 * w, -4 * z, 2 * y], axis=1),
        np.stack([2 * x, 2 * y, zero], axis=1),
    ], axis=1)
    return np.stack([dw, dx, dy, dz], axis=1)


def rasterize_backward(ctx: RenderContext, grads: RenderGradients) -> ParamGradients:
    """Analytic adjoints of rasterize for every learnable input.

    Tiles are processed sequentially in tile-index order, so accumulation
    order (and therefore the result) is independent of the forward thread
    count.
    """
    camera, splats, opts, proj = ctx.camera, ctx.splats, ctx.opts, ctx.proj
    h, w = camera.height, camera.width
    n = splats.count
    kv = proj.index.size

    dc = grads.d_color if grads.d_color is not None else np.zeros((h, w, 3))
    dd = grads.d_depth if grads.d_depth is not None else np.zeros((h, w))
    df = grads.d_flow if grads.d_flow is not None else np.zeros((h, w, 2))
    dt_out = (grads.d_transmittance if grads.d_transmittance is not None
              else np.zeros((h, w)))

    g_color = np.zeros((kv, 3))
    g_depth = np.zeros(kv)
    g_flow = np.zeros((kv, 2))
    g_alpha_base = np.zeros(kv)
    g_mean2d = np.zeros((kv, 2))
    g_conic = np.zeros((kv, 3))
    g_background = np.zeros(3)
    touched = np.zeros(kv, dtype=bool)

    bg = opts.background
    zk = proj.p_cam[:, 2] if kv else np.zeros(0)

    for y0, x0, rows in ctx.tiles:
        ys, xs, th, tw = _pixel_grid(y0, x0, h, w, opts.tile_size)
        dc_t = dc[y0:y0 + th, x0:x0 + tw].reshape(-1, 3)
        dd_t = dd[y0:y0 + th, x0:x0 + tw].reshape(-1)
        df_t = df[y0:y0 + th, x0:x0 + tw].reshape(-1, 2)
        dto_t = dt_out[y0:y0 + th, x0:x0 + tw].reshape(-1)
        if rows.size == 0:
            g_background += dc_t.sum(axis=0)  # transmittance is 1 here
            continue
        touched[rows] = True

        alpha, gauss, clipped = _tile_alpha(proj, rows, xs, ys)
        weights, t_before, t_final, processed = _composite_tile(alpha)
        g_background += t_final @ dc_t

        col = proj.color[rows]
        dep = zk[rows]
        flo = proj.flow[rows]

        # Per-splat channel adjoints.
        g_color[rows] += weights.T @ dc_t
        g_depth[rows] += weights.T @ dd_t
        g_flow[rows] += weights.T @ df_t

        # d loss / d alpha via suffix sums of later contributions.
        zc = weights[:, :, None] * col[None, :, :]
        zd = weights * dep[None, :]
        zf = weights[:, :, None] * flo[None, :, :]
        suf_c = np.flip(np.cumsum(np.flip(zc, axis=1), axis=1), axis=1)
        suf_c = np.concatenate([suf_c[:, 1:, :], np.zeros_like(suf_c[:, :1, :])], axis=1)
        suf_c += (t_final[:, None] * bg[None, :])[:, None, :]
        suf_d = np.flip(np.cumsum(np.flip(zd, axis=1), axis=1), axis=1)
        suf_d = np.concatenate([suf_d[:, 1:], np.zeros_like(suf_d[:, :1])], axis=1)
        suf_f = np.flip(np.cumsum(np.flip(zf, axis=1), axis=1), axis=1)
        suf_f = np.concatenate([suf_f[:, 1:, :], np.zeros_like(suf_f[:, :1, :])], axis=1)

        inv_om = 1.0 / (1.0 - alpha)
        d_alpha = np.einsum("pc,pkc->pk", dc_t, col[None, :, :] * t_before[:, :, None]
                            - suf_c * inv_om[:, :, None])
        d_alpha += dd_t[:, None] * (dep[None, :] * t_before - suf_d * inv_om)
        d_alpha += np.einsum("pc,pkc->pk", df_t, flo[None, :, :] * t_before[:, :, None]
                             - suf_f * inv_om[:, :, None])
        d_alpha += dto_t[:, None] * (-t_final[:, None] * inv_om)
        live = processed & (alpha > 0.0)
        d_alpha = np.where(live, d_alpha, 0.0)

        d_raw = np.where(clipped, 0.0, d_alpha)
        g_alpha_base[rows] += (d_raw * gauss).sum(axis=0)
        d_gauss = d_raw * proj.alpha_base[rows][None, :] * gauss

        mean = proj.mean2d[rows]
        con = proj.conic[rows]
        dxp = xs[:, None] - mean[None, :, 0]
        dyp = ys[:, None] - mean[None, :, 1]
        cdx = con[None, :, 0] * dxp + con[None, :, 1] * dyp
        cdy = con[None, :, 1] * dxp + con[None, :, 2] * dyp
        g_mean2d[rows, 0] += (d_gauss * cdx).sum(axis=0)
        g_mean2d[rows, 1] += (d_gauss * cdy).sum(axis=0)
        g_conic[rows, 0] += (d_gauss * (-0.5 * dxp * dxp)).sum(axis=0)
        g_conic[rows, 1] += (d_gauss * (-dxp * dyp)).sum(axis=0)
        g_conic[rows, 2] += (d_gauss * (-0.5 * dyp * dyp)).sum(axis=0)

    # Per-splat chains, vectorized over the surviving set.
    g_position = np.zeros((n, 3))
    g_rotation = np.zeros((n, 4))
    g_log_scale = np.zeros((n, 3))
    g_sh = np.zeros_like(splats.sh)
    g_opacity = np.zeros(n)
    g_velocity = np.zeros((n, 3))
    g_center = np.zeros(n)
    g_extent = np.zeros(n)
    g_dgamma = 0.0
    screen = np.zeros((n, 2))
    visible = np.zeros(n, dtype=bool)

    if kv:
        screen[proj.index] = g_mean2d
        visible[proj.index] = touched

        # conic -> 2D covariance (closed-form inverse adjoint).
        ca, cb, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
        da, db, dcn = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
        g_ma = -(da * ca * ca + db * ca * cb + dcn * cb * cb)
        g_mb = -(2 * da * ca * cb + db * (ca * cc + cb * cb) + 2 * dcn * cb * cc)
        g_mc = -(da * cb * cb + db * cb * cc + dcn * cc * cc)

        X, Y, Z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
        fxz = camera.fx / Z
        fyz = camera.fy / Z
        j02 = -camera.fx * X / (Z * Z)
        j12 = -camera.fy * Y / (Z * Z)
        j1 = np.stack([fxz, np.zeros(kv), j02], axis=1)
        j2 = np.stack([np.zeros(kv), fyz, j12], axis=1)

        # 2D covariance -> camera covariance and Jacobian rows.
        g_cov_cam = (g_ma[:, None, None] * np.einsum("ki,kj->kij", j1, j1)
                     + g_mb[:, None, None] * np.einsum("ki,kj->kij", j1, j2)
                     + g_mc[:, None, None] * np.einsum("ki,kj->kij", j2, j2))
        sj1 = np.einsum("kij,kj->ki", proj.cov_cam, j1)
        sj2 = np.einsum("kij,kj->ki", proj.cov_cam, j2)
        g_j1 = 2 * g_ma[:, None] * sj1 + g_mb[:, None] * sj2
        g_j2 = 2 * g_mc[:, None] * sj2 + g_mb[:, None] * sj1

        # Flow contributes to the Jacobian rows and to velocity.
        dt_frame = frame_duration(opts.num_frames)
        u = proj.u_cam
        g_j1 += (g_flow[:, 0] * dt_frame)[:, None] * u
        g_j2 += (g_flow[:, 1] * dt_frame)[:, None] * u
        g_u = (g_flow[:, 0] * dt_frame)[:, None] * j1 + (g_flow[:, 1] * dt_frame)[:, None] * j2
        g_velocity_rows = g_u @ camera.rotation

        # Jacobian entries and mean2d back to camera-space position.
        g_X = g_j1[:, 2] * (-camera.fx / (Z * Z))
        g_Y = g_j2[:, 2] * (-camera.fy / (Z * Z))
        g_Z = (g_j1[:, 0] * (-camera.fx / (Z * Z))
               + g_j1[:, 2] * (2 * camera.fx * X / Z ** 3)
               + g_j2[:, 1] * (-camera.fy / (Z * Z))
               + g_j2[:, 2] * (2 * camera.fy * Y / Z ** 3))
        g_X += g_mean2d[:, 0] * fxz
        g_Z += g_mean2d[:, 0] * j02
        g_Y += g_mean2d[:, 1] * fyz
        g_Z += g_mean2d[:, 1] * j12
        g_Z += g_depth
        g_pcam = np.stack([g_X, g_Y, g_Z], axis=1)
        g_pos_t = g_pcam @ camera.rotation

        # Camera covariance -> world covariance -> quaternion and scale.
        g_cov_world = np.einsum("ji,kjl,lm->kim", camera.rotation, g_cov_cam,
                                camera.rotation)
        sym = g_cov_world + np.transpose(g_cov_world, (0, 2, 1))
        scale2 = np.exp(2.0 * splats.log_scale[proj.index])
        g_rot_q = np.einsum("kij,kjl->kil", sym, proj.rot_q * scale2[:, None, :])
        g_diag = np.einsum("kji,kjl,kli->ki", proj.rot_q, g_cov_world, proj.rot_q)
        g_log_scale_rows = g_diag * 2.0 * scale2

        partials = _quat_rotation_partials(proj.quat_n)
        g_qn = np.einsum("kqij,kij->kq", partials, g_rot_q)
        dot = np.einsum("kq,kq->k", g_qn, proj.quat_n)
        g_q_rows = (g_qn - dot[:, None] * proj.quat_n) / proj.quat_norm[:, None]

        # Color -> sh and view direction -> position.
        interior = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
        g_cal = g_color * interior
        g_sh_rows = proj.basis[:, :, None] * g_cal[:, None, :]
        degree = splats.sh_degree
        bgrad = sh_basis_gradient(proj.dirs, degree)
        coeff = np.einsum("kbc,kc->kb", splats.sh[proj.index], g_cal)
        g_dir = np.einsum("kb,kbd->kd", coeff, bgrad)
        g_pos_t += (g_dir - proj.dirs * np.einsum("kd,kd->k", g_dir, proj.dirs)[:, None]) \
            / proj.dist[:, None]

        # Instant quantities -> raw parameters and effective time.
        # Projection rows are unique, so fancy-indexed assignment is safe.
        tg = evaluate_time_gradients(splats, ctx.t_eff)
        idx = proj.index
        g_position[idx] = g_pos_t
        g_velocity[idx] = g_velocity_rows + g_pos_t * tg.dposition_dvelocity[idx][:, None]
        g_center[idx] = (np.einsum("kd,kd->k", g_pos_t, tg.dposition_dcenter[idx])
                         + g_alpha_base * tg.dopacity_dcenter[idx])
        g_opacity[idx] = g_alpha_base * tg.dopacity_dlogit[idx]
        g_extent[idx] = g_alpha_base * tg.dopacity_dextent[idx]
        g_rotation[idx] = g_q_rows
        g_log_scale[idx] = g_log_scale_rows
        g_sh[idx] = g_sh_rows
        g_dgamma = float(np.einsum("kd,kd->", g_pos_t, tg.dposition_dt[idx])
                         + np.dot(g_alpha_base, tg.dopacity_dt[idx]))

    return ParamGradients(
        position=g_position, rotation=g_rotation, log_scale=g_log_scale,
        sh=g_sh, opacity_logit=g_opacity, velocity=g_velocity,
        temporal_center=g_center, temporal_extent=g_extent,
        delta_gamma=g_dgamma, background=g_background,
        screen_space=screen, visible=visible,
    )
