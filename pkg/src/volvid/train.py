"""Joint optimization of splats, per-camera clocks, and color grids.

One Adam step per (camera, frame) visit; each epoch is a fresh seeded
permutation of all training pairs. Densification clones/splits primitives
whose accumulated screen-space gradient is large and prunes transparent
ones. Everything is deterministic given the seed, including densification,
and a run can be suspended to a state file and resumed bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .manifest import SceneManifest
from .objective import (BilateralGrid, DepthAlignmentError, LossBreakdown,
                        LossWeights, align_depth, apply_color_grid,
                        color_grid_backward, color_loss, depth_loss, flow_loss,
                        psnr, reg_loss, ssim, total_loss)
from .raster import (CameraModel, ParamGradients, RasterOptions,
                     RenderGradients, rasterize, rasterize_backward,
                     render_forward)
from .scene import MIN_TEMPORAL_EXTENT, SplatSet, frame_time, sigmoid

_SPLAT_PARAMS = ("position", "rotation", "log_scale", "sh", "opacity_logit",
                 "velocity", "temporal_center", "temporal_extent")


class TrainingDiverged(RuntimeError):
    """A loss term or parameter went non-finite; message names the step."""


@dataclass
class TrainConfig:
    epochs: int = 30
    seed: int = 0
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    lr_position: float = 1.6e-4        # times scene extent, decayed
    lr_position_final: float = 1.6e-6  # times scene extent, end of schedule
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5.0e-2
    lr_scale: float = 5.0e-3
    lr_rotation: float = 1.0e-3
    lr_velocity: float = 2.0e-3
    lr_temporal_center: float = 1.0e-5
    lr_temporal_extent: float = 3.0e-2
    lr_delta_gamma: float = 1.0e-4
    lr_grid: float = 2.0e-3

    densify_interval: int = 100
    densify_grad_threshold: float = 2.0e-4
    densify_until_epoch: int = 15
    densify_clone_scale: float = 0.01  # times scene extent; larger means split
    densify_split_factor: float = 1.6
    prune_opacity: float = 0.005

    pin_camera: str | None = None      # hold this camera's offset at zero
    freeze_static_velocity: bool = False
    optimize_offsets: bool = True
    optimize_grids: bool = True
    log_every: int = 1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        for name in ("lr_position", "lr_sh", "lr_opacity", "lr_scale",
                     "lr_rotation", "lr_velocity", "lr_temporal_center",
                     "lr_temporal_extent", "lr_delta_gamma", "lr_grid"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Adam:
    """Moment state keyed by parameter name; rows follow densification."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1.0e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray,
               lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        t = self.step_count
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reindex_rows(self, names: tuple[str, ...], keep: np.ndarray,
                     num_new: int) -> None:
        """Keep the selected rows and append zeroed rows for new splats."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                fresh = np.zeros((num_new,) + old.shape[1:], dtype=old.dtype)
                store[name] = np.concatenate([old[keep], fresh], axis=0)


@dataclass
class DensifyStats:
    grad_accum: np.ndarray  # (N,) summed screen-space gradient norms
    visits: np.ndarray      # (N,) how many steps the splat was visible

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(grad_accum=np.zeros(n), visits=np.zeros(n))


@dataclass
class TrainState:
    """Everything needed to resume a run exactly where it stopped."""

    splats: SplatSet
    cameras: list[CameraModel]
    adam: Adam
    stats: DensifyStats
    rng: np.random.Generator
    step: int = 0
    epochs_done: int = 0
    # set by train() on entry; not persisted
    config: TrainConfig = field(default_factory=TrainConfig)
    extent: float = 1.0
    total_steps: int = 1


@dataclass
class TrainResult:
    splats: SplatSet
    cameras: list[CameraModel]
    log: list[dict]
    state: TrainState


def scene_extent(cameras: list[CameraModel]) -> float:
    """Radius of the camera-center cloud, the global distance scale."""
    centers = np.stack([c.center() for c in cameras])
    mean = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - mean, axis=1)))
    return max(radius, 1.0e-6)


@dataclass
class _Batch:
    image: np.ndarray
    flow: np.ndarray | None
    aligned_depth: np.ndarray | None


def _load_batches(manifest: SceneManifest,
                  cameras: list[CameraModel]) -> dict[tuple[str, int], _Batch]:
    """Cache every training view's priors; depth is pre-aligned to metric."""
    batches: dict[tuple[str, int], _Batch] = {}
    for cam in cameras:
        entry = manifest.camera_entry(cam.cam_id)
        anchors = manifest.sparse_depth_samples(cam) if entry.depths else None
        for k in range(manifest.num_frames):
            image = manifest.load_image(cam.cam_id, k)
            if image.shape[:2] != (cam.height, cam.width):
                raise ValueError(
                    f"image for {cam.cam_id} frame {k} is {image.shape[:2]}, "
                    f"camera says {(cam.height, cam.width)}")
            flow = None
            if entry.flows and os.path.exists(manifest.flow_path(cam.cam_id, k)):
                flow = manifest.load_flow(cam.cam_id, k)
            aligned = None
            if entry.depths and os.path.exists(manifest.depth_path(cam.cam_id, k)):
                mono = manifest.load_depth(cam.cam_id, k)
                if anchors is not None and anchors.shape[0] >= 2:
                    try:
                        a, b = align_depth(mono, anchors)
                        aligned = a * mono + b
                    except DepthAlignmentError:
                        aligned = None
            batches[(cam.cam_id, k)] = _Batch(image=image, flow=flow,
                                              aligned_depth=aligned)
    return batches


def _train_step(state: TrainState, cam_index: int, frame: int,
                batch: _Batch, opts: RasterOptions, weights: LossWeights,
                trainable: set[str]) -> tuple[LossBreakdown, "ParamGradients"]:
    camera = state.cameras[cam_index]
    t = frame_time(frame, opts.num_frames)
    out, ctx = render_forward(camera, state.splats, t, opts)

    grid = camera.color_grid
    graded = apply_color_grid(grid, out.color) if grid is not None else out.color
    c_val, c_grad = color_loss(graded, batch.image, weights.lambda_dssim)
    if grid is not None:
        d_image, d_cells = color_grid_backward(
            grid, out.color, weights.lambda_color * c_grad)
    else:
        d_image, d_cells = weights.lambda_color * c_grad, None

    d_val = f_val = 0.0
    d_depth = d_flow = None
    if batch.aligned_depth is not None and weights.lambda_depth != 0.0:
        d_val, g = depth_loss(out.depth, batch.aligned_depth,
                              out.transmittance, weights.depth_mask_threshold)
        d_depth = weights.lambda_depth * g
    if batch.flow is not None and weights.lambda_flow != 0.0:
        f_val, g = flow_loss(out.flow, batch.flow)
        d_flow = weights.lambda_flow * g

    offsets = np.array([c.delta_gamma for c in state.cameras])
    r_val, r_grad = reg_loss(offsets)

    breakdown = total_loss(c_val, 0.0, d_val, f_val, r_val, weights)
    for term, value in (("color", c_val), ("depth", d_val), ("flow", f_val),
                        ("reg", r_val)):
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite {term} loss at step {state.step} "
                f"(camera {camera.cam_id}, frame {frame})")

    pg = rasterize_backward(ctx, RenderGradients(
        d_color=d_image, d_depth=d_depth, d_flow=d_flow))

    adam = state.adam
    adam.step_count += 1
    if "splats" in trainable:
        lr_by_name = _splat_learning_rates(state)
        for name in _SPLAT_PARAMS:
            grad = getattr(pg, name)
            if name == "velocity" and state.config.freeze_static_velocity:
                grad = grad.copy()
                grad[state.splats.is_static] = 0.0
            adam.update(name, getattr(state.splats, name), grad,
                        lr_by_name[name])
        state.splats.temporal_extent[:] = np.maximum(
            state.splats.temporal_extent, MIN_TEMPORAL_EXTENT)
        norms = np.linalg.norm(state.splats.rotation, axis=1, keepdims=True)
        state.splats.rotation /= np.maximum(norms, 1.0e-12)
    if "offsets" in trainable:
        cfg = state.config
        for i, cam in enumerate(state.cameras):
            g = weights.lambda_reg * r_grad[i]
            if i == cam_index:
                g = g + pg.delta_gamma
            p = np.array([cam.delta_gamma])
            adam.update(f"dgamma:{cam.cam_id}", p, np.array([g]),
                        cfg.lr_delta_gamma)
            cam.delta_gamma = float(p[0])
            if cfg.pin_camera is not None and cam.cam_id == cfg.pin_camera:
                cam.delta_gamma = 0.0
    if "grids" in trainable and d_cells is not None:
        adam.update(f"grid:{camera.cam_id}", grid.cells, d_cells,
                    state.config.lr_grid)
    return breakdown, pg


def _splat_learning_rates(state: TrainState) -> dict[str, float]:
    cfg = state.config
    progress = min(state.step / max(state.total_steps, 1), 1.0)
    ratio = cfg.lr_position_final / cfg.lr_position
    lr_pos = cfg.lr_position * state.extent * (ratio ** progress)
    return {
        "position": lr_pos,
        "rotation": cfg.lr_rotation,
        "log_scale": cfg.lr_scale,
        "sh": cfg.lr_sh,
        "opacity_logit": cfg.lr_opacity,
        "velocity": cfg.lr_velocity,
        "temporal_center": cfg.lr_temporal_center,
        "temporal_extent": cfg.lr_temporal_extent,
    }


def densify_and_prune(splats: SplatSet, stats: DensifyStats,
                      config: TrainConfig, extent: float,
                      rng: np.random.Generator,
                      adam: Adam | None = None) -> tuple[SplatSet, DensifyStats]:
    """Clone small / split large high-gradient splats, drop transparent ones.

    Children inherit velocity and temporal parameters; split children get
    log_scale - ln(split_factor) and both sample their position from the
    parent's spatial distribution. Adam moment rows for survivors carry
    over; new rows start at zero.
    """
    avg = stats.grad_accum / np.maximum(stats.visits, 1.0)
    opacity = sigmoid(splats.opacity_logit)
    keep = opacity >= config.prune_opacity
    hot = (avg > config.densify_grad_threshold) & keep
    max_scale = np.exp(splats.log_scale).max(axis=1)
    clone = hot & (max_scale <= config.densify_clone_scale * extent)
    split = hot & ~clone

    def sample_offsets(idx: np.ndarray) -> np.ndarray:
        if idx.size == 0:
            return np.zeros((0, 3))
        draws = rng.standard_normal((idx.size, 3))
        scaled = draws * np.exp(splats.log_scale[idx])
        w, x, y, z = (splats.rotation[idx, i] for i in range(4))
        rot = np.stack([
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z),
                      2 * (x * z + w * y)], axis=1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z),
                      2 * (y * z - w * x)], axis=1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x),
                      1 - 2 * (x * x + y * y)], axis=1),
        ], axis=1)
        return np.einsum("nij,nj->ni", rot, scaled)

    parts = [splats.take(np.flatnonzero(keep & ~split))]
    clone_idx = np.flatnonzero(clone)
    if clone_idx.size:
        children = splats.take(clone_idx)
        children.position += sample_offsets(clone_idx)
        parts.append(children)
    split_idx = np.flatnonzero(split)
    for _ in range(2):
        if split_idx.size:
            children = splats.take(split_idx)
            children.position = splats.position[split_idx] \
                + sample_offsets(split_idx)
            children.log_scale = splats.log_scale[split_idx] \
                - np.log(config.densify_split_factor)
            parts.append(children)

    merged = SplatSet.concatenate(parts)
    survivors = np.flatnonzero(keep & ~split)
    if adam is not None:
        adam.reindex_rows(_SPLAT_PARAMS, survivors,
                          merged.count - survivors.size)
    return merged, DensifyStats.zeros(merged.count)


def train(manifest: SceneManifest, splats: SplatSet,
          cameras: list[CameraModel], config: TrainConfig | None = None,
          state: TrainState | None = None,
          trainable: set[str] | None = None,
          use_held_out: bool = False,
          until_epoch: int | None = None) -> TrainResult:
    """Optimize for config.epochs total passes (resuming if state is given).

    until_epoch pauses the run after that many epochs without shortening the
    learning-rate schedule, so a later resume lands exactly where an
    uninterrupted run would. use_held_out admits the held-out camera's
    frames into the schedule; only safe when splats are frozen (offset
    calibration), never for geometry.
    """
    config = config or TrainConfig()
    config.validate()
    trainable = trainable if trainable is not None \
        else {"splats", "offsets", "grids"}
    if not config.optimize_offsets:
        trainable = trainable - {"offsets"}
    if not config.optimize_grids:
        trainable = trainable - {"grids"}
    if use_held_out and "splats" in trainable:
        raise ValueError("held-out frames may only drive per-camera "
                         "parameters, not splats")

    train_cams = [c for c in cameras if use_held_out
                  or c.cam_id != manifest.held_out_camera]
    if not train_cams:
        raise ValueError("no training cameras after removing the held-out one")
    for cam in train_cams:
        if cam.color_grid is None:
            cam.color_grid = BilateralGrid.identity(cam_id=cam.cam_id)

    if state is None:
        state = TrainState(
            splats=splats.copy(),
            cameras=[c.copy() for c in cameras],
            adam=Adam(),
            stats=DensifyStats.zeros(splats.count),
            rng=np.random.default_rng(config.seed))
    live_train = [c for c in state.cameras if use_held_out
                  or c.cam_id != manifest.held_out_camera]

    pairs = [(i, k) for i in range(len(live_train))
             for k in range(manifest.num_frames)]
    state.config = config
    state.extent = scene_extent(state.cameras)
    state.total_steps = config.epochs * len(pairs)

    batches = _load_batches(manifest, live_train)
    opts = RasterOptions(background=manifest.background.copy(),
                         num_frames=manifest.num_frames,
                         threads=config.threads)
    cam_index_of = {c.cam_id: i for i, c in enumerate(state.cameras)}

    last_epoch = config.epochs if until_epoch is None \
        else min(config.epochs, until_epoch)
    log: list[dict] = []
    for epoch in range(state.epochs_done, last_epoch):
        order = state.rng.permutation(len(pairs))
        for j in order:
            local_i, frame = pairs[j]
            cam = live_train[local_i]
            state.step += 1
            breakdown, pg = _train_step(
                state, cam_index_of[cam.cam_id], frame,
                batches[(cam.cam_id, frame)], opts, config.weights, trainable)

            if "splats" in trainable:
                vis = pg.visible
                state.stats.grad_accum[vis] += np.linalg.norm(
                    pg.screen_space[vis], axis=1)
                state.stats.visits[vis] += 1.0
                if (epoch < config.densify_until_epoch
                        and state.step % config.densify_interval == 0):
                    state.splats, state.stats = densify_and_prune(
                        state.splats, state.stats, config, state.extent,
                        state.rng, state.adam)

            if state.step % config.log_every == 0:
                log.append({
                    "step": state.step, "epoch": epoch, "camera": cam.cam_id,
                    "frame": frame, "total": breakdown.total,
                    "color": breakdown.color, "depth": breakdown.depth,
                    "flow": breakdown.flow, "reg": breakdown.reg,
                    "count": state.splats.count})
        state.epochs_done = epoch + 1
    state.splats.validate()
    return TrainResult(splats=state.splats, cameras=state.cameras, log=log,
                       state=state)


def calibrate_offsets_only(manifest: SceneManifest, splats: SplatSet,
                           cameras: list[CameraModel],
                           config: TrainConfig | None = None) -> TrainResult:
    """Fit per-camera clock offsets against frozen splats (color + reg only).

    Every camera is calibrated, the held-out one included: with geometry
    frozen its frames touch nothing shared, and evaluation at the right
    instant needs its clock too.
    """
    config = config or TrainConfig()
    weights = LossWeights(
        lambda_dssim=config.weights.lambda_dssim,
        lambda_color=config.weights.lambda_color,
        lambda_depth=0.0, lambda_flow=0.0,
        lambda_reg=config.weights.lambda_reg)
    frozen = TrainConfig(**{**config.__dict__, "weights": weights})
    return train(manifest, splats, cameras, frozen, trainable={"offsets"},
                 use_held_out=True)


def evaluate_holdout(manifest: SceneManifest, splats: SplatSet,
                     cameras: list[CameraModel],
                     threads: int = 1) -> list[dict]:
    """Per-frame PSNR/SSIM on the held-out camera, plus a mean row."""
    held = [c for c in cameras if c.cam_id == manifest.held_out_camera]
    if not held:
        raise ValueError(f"held-out camera {manifest.held_out_camera!r} "
                         "is not in the camera list")
    cam = held[0]
    opts = RasterOptions(background=manifest.background.copy(),
                         num_frames=manifest.num_frames, threads=threads)
    rows = []
    for k in range(manifest.num_frames):
        gt = manifest.load_image(cam.cam_id, k)
        pred = np.clip(rasterize(cam, splats, frame_time(
            k, manifest.num_frames), opts).color, 0.0, 1.0)
        rows.append({"frame": k, "psnr": psnr(pred, gt),
                     "ssim": ssim(pred, gt)})
    rows.append({"frame": "mean",
                 "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows]))})
    return rows


# ------------------------------------------------------------ state files

def save_train_state(path, state: TrainState) -> None:
    """Sidecar with full float64 precision for exact resume."""
    arrays: dict[str, np.ndarray] = {}
    for name in _SPLAT_PARAMS:
        arrays[f"splat.{name}"] = getattr(state.splats, name)
    arrays["splat.is_static"] = state.splats.is_static
    for key in state.adam.m:
        arrays[f"adam.m.{key}"] = state.adam.m[key]
        arrays[f"adam.v.{key}"] = state.adam.v[key]
    arrays["stats.grad_accum"] = state.stats.grad_accum
    arrays["stats.visits"] = state.stats.visits
    for cam in state.cameras:
        arrays[f"cam.{cam.cam_id}.delta_gamma"] = np.array([cam.delta_gamma])
        if cam.color_grid is not None:
            arrays[f"cam.{cam.cam_id}.grid"] = cam.color_grid.cells
    meta = {
        "step": state.step,
        "epochs_done": state.epochs_done,
        "adam_step_count": state.adam.step_count,
        "camera_ids": [c.cam_id for c in state.cameras],
        "rng_state": state.rng.bit_generator.state,
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_train_state(path, cameras: list[CameraModel]) -> TrainState:
    """Rebuild a TrainState; cameras supply geometry, the file supplies values."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        fields = {name: data[f"splat.{name}"].copy() for name in _SPLAT_PARAMS}
        fields["is_static"] = data["splat.is_static"].copy()
        splats = SplatSet(**fields)
        splats.validate()
        adam = Adam()
        adam.step_count = int(meta["adam_step_count"])
        for key in data.files:
            if key.startswith("adam.m."):
                adam.m[key[len("adam.m."):]] = data[key].copy()
            elif key.startswith("adam.v."):
                adam.v[key[len("adam.v."):]] = data[key].copy()
        stats = DensifyStats(grad_accum=data["stats.grad_accum"].copy(),
                             visits=data["stats.visits"].copy())
        by_id = {c.cam_id: c for c in cameras}
        if set(meta["camera_ids"]) != set(by_id):
            raise ValueError("state file cameras do not match the manifest")
        restored = []
        for cam_id in meta["camera_ids"]:
            cam = by_id[cam_id].copy()
            cam.delta_gamma = float(data[f"cam.{cam_id}.delta_gamma"][0])
            grid_key = f"cam.{cam_id}.grid"
            if grid_key in data.files:
                cam.color_grid = BilateralGrid(cells=data[grid_key].copy(),
                                               cam_id=cam_id)
            restored.append(cam)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    state = TrainState(splats=splats, cameras=restored, adam=adam,
                       stats=stats, rng=rng, step=int(meta["step"]),
                       epochs_done=int(meta["epochs_done"]))
    return state
