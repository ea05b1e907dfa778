"""End-to-end gates, one test per shipped contract, at pinned tolerances.

Each test here states a promise the package is released under: rasterizer
equivalence with a brute-force oracle, analytic gradients that survive a
finite-difference audit through the full objective chain, sub-millisecond
camera clock recovery, compact flow-guided seeding, a CLI pipeline that
reaches reference quality bit-reproducibly, closed-form audio identities,
metric parity with independent reimplementations, bit-exact persistence
with crash-free garbage handling, and a conformant live render service.
"""
import contextlib
import io
import json
import os
import socket
import threading
import time

import numpy as np
import pytest

from testkit import (look_at_camera, project_point, random_splats,
                     reference_psnr, reference_ssim, ring_of_cameras)
from volvid import fileio, protocol
from volvid.cli import main
from volvid.fileio import FormatError
from volvid.manifest import load_manifest
from volvid.objective import (BilateralGrid, LossWeights, apply_color_grid,
                              color_grid_backward, color_loss, depth_loss,
                              flow_loss, psnr, reg_loss, ssim)
from volvid.raster import (RasterOptions, RenderGradients,
                           offset_to_milliseconds, rasterize,
                           rasterize_backward, rasterize_reference,
                           render_forward)
from volvid.scene import empty_splats, evaluate_at_time, frame_time
from volvid.seeding import InitConfig, classify_points, initialize_from_manifest
from volvid.serve import RenderService, encode_jpeg, pose_to_camera
from volvid.soundfield import (AudioClip, ListenerPose, SourceTrajectory,
                               binauralize, distance_gain, identity_hrirs,
                               source_azimuth, triangulate_source)
from volvid.synth import (preset_calibration, random_scene, ring_cameras,
                          write_dataset)
from volvid.train import TrainConfig, calibrate_offsets_only


# ---------------------------------------------------- rasterizer equivalence

def test_tiled_rasterizer_matches_brute_force_reference():
    """200 randomized scenes, every output channel within 1e-5 of the oracle."""
    rng = np.random.default_rng(20240817)
    for case in range(200):
        if case % 20 == 0:
            n, w, h = 100, 64, 64   # revisit the largest allowed scene often
        else:
            n = int(rng.integers(0, 101))
            w = int(rng.integers(12, 65))
            h = int(rng.integers(12, 65))
        degree = int(rng.integers(0, 4))
        if n == 0:
            sp = empty_splats(0, sh_degree=degree)
        else:
            sp = random_splats(rng, n=n, sh_degree=degree,
                               dynamic_fraction=float(rng.uniform(0.0, 1.0)))
        ang = rng.uniform(0.0, 2.0 * np.pi)
        center = (3.0 * np.cos(ang), 3.0 * np.sin(ang),
                  float(rng.uniform(-1.5, 2.5)))
        cam = look_at_camera("c", center, width=w, height=h,
                             focal=float(rng.uniform(0.4, 1.2)) * w)
        cam.delta_gamma = float(rng.uniform(-0.05, 0.05))
        opts = RasterOptions(background=rng.uniform(0.0, 1.0, size=3),
                             num_frames=int(rng.integers(2, 9)))
        t = float(rng.uniform(0.0, 1.0))
        fast = rasterize(cam, sp, t, opts)
        ref = rasterize_reference(cam, sp, t, opts)
        for label, a, b in (("color", fast.color, ref.color),
                            ("depth", fast.depth, ref.depth),
                            ("flow", fast.flow, ref.flow),
                            ("transmittance", fast.transmittance,
                             ref.transmittance)):
            diff = float(np.abs(a - b).max()) if a.size else 0.0
            assert diff < 1e-5, f"case {case} ({n} splats {w}x{h}): " \
                                f"{label} off by {diff}"


# ------------------------------------------------------------ gradient audit

def _chain_loss(sp, cam, grid, t, opts, targets):
    """Scalar objective: color through the grid, plus depth, flow and reg."""
    out = rasterize(cam, sp, t, opts)
    c, _ = color_loss(apply_color_grid(grid, out.color), targets["color"], 0.2)
    d, _ = depth_loss(out.depth, targets["depth"], out.transmittance, 1.5)
    f, _ = flow_loss(out.flow, targets["flow"])
    r, _ = reg_loss(np.array([cam.delta_gamma, -0.02]))
    return 1.0 * c + 0.7 * d + 0.9 * f + 0.5 * r


def test_analytic_gradients_survive_finite_difference_audit():
    """Every learnable class, through rasterize, grid and every loss term."""
    rng = np.random.default_rng(77)
    sp = random_splats(rng, n=5, sh_degree=1, dynamic_fraction=1.0)
    cam = look_at_camera("probe", (0.4, -3.2, 0.9), width=16, height=16,
                         focal=11.0)
    cam.delta_gamma = 0.013
    grid = BilateralGrid.identity(4, 4, 3, "probe")
    grid.cells += rng.normal(scale=0.05, size=grid.cells.shape)
    opts = RasterOptions(background=np.array([0.15, 0.25, 0.35]), num_frames=5)
    t = 0.42

    # targets rendered from a perturbed twin so every residual is nonzero
    # and no L1 kink sits exactly at the evaluation point
    twin = sp.copy()
    twin.position += rng.normal(scale=0.04, size=twin.position.shape)
    twin.sh[:, 0, :] += rng.normal(scale=0.15, size=(twin.count, 3))
    base = rasterize(cam, twin, t, opts)
    targets = {"color": apply_color_grid(grid, base.color),
               "depth": base.depth * 0.9 - 0.05,
               "flow": base.flow + np.array([0.03, -0.02])}

    out, ctx = render_forward(cam, sp, t, opts)
    _, c_grad = color_loss(apply_color_grid(grid, out.color),
                           targets["color"], 0.2)
    d_image, d_cells = color_grid_backward(grid, out.color, 1.0 * c_grad)
    _, g_depth = depth_loss(out.depth, targets["depth"], out.transmittance, 1.5)
    _, g_flow = flow_loss(out.flow, targets["flow"])
    _, g_reg = reg_loss(np.array([cam.delta_gamma, -0.02]))
    pg = rasterize_backward(ctx, RenderGradients(
        d_color=d_image, d_depth=0.7 * g_depth, d_flow=0.9 * g_flow))

    checks = []
    eps = 1e-5
    splat_classes = ("position", "rotation", "log_scale", "sh",
                     "opacity_logit", "velocity", "temporal_center",
                     "temporal_extent")
    for name in splat_classes:
        arr = getattr(sp, name)
        flat = arr.reshape(arr.shape[0], -1)
        analytic = getattr(pg, name).reshape(flat.shape)
        for _ in range(3):
            i = int(rng.integers(flat.shape[0]))
            j = int(rng.integers(flat.shape[1]))
            hi, lo = sp.copy(), sp.copy()
            getattr(hi, name).reshape(flat.shape)[i, j] += eps
            getattr(lo, name).reshape(flat.shape)[i, j] -= eps
            fd = (_chain_loss(hi, cam, grid, t, opts, targets)
                  - _chain_loss(lo, cam, grid, t, opts, targets)) / (2 * eps)
            checks.append((f"{name}[{i},{j}]", analytic[i, j], fd))

    hi_cam, lo_cam = cam.copy(), cam.copy()
    hi_cam.delta_gamma += eps
    lo_cam.delta_gamma -= eps
    fd = (_chain_loss(sp, hi_cam, grid, t, opts, targets)
          - _chain_loss(sp, lo_cam, grid, t, opts, targets)) / (2 * eps)
    checks.append(("delta_gamma", pg.delta_gamma + 0.5 * g_reg[0], fd))

    for _ in range(4):
        idx = tuple(int(rng.integers(s)) for s in grid.cells.shape)
        hi_g, lo_g = grid.copy(), grid.copy()
        hi_g.cells[idx] += 1e-4
        lo_g.cells[idx] -= 1e-4
        fd = (_chain_loss(sp, cam, hi_g, t, opts, targets)
              - _chain_loss(sp, cam, lo_g, t, opts, targets)) / 2e-4
        checks.append((f"grid{list(idx)}", d_cells[idx], fd))

    for c in range(3):
        bg_hi = opts.background.copy()
        bg_lo = opts.background.copy()
        bg_hi[c] += eps
        bg_lo[c] -= eps
        hi_o = RasterOptions(background=bg_hi, num_frames=opts.num_frames)
        lo_o = RasterOptions(background=bg_lo, num_frames=opts.num_frames)
        fd = (_chain_loss(sp, cam, grid, t, hi_o, targets)
              - _chain_loss(sp, cam, grid, t, lo_o, targets)) / (2 * eps)
        checks.append((f"background[{c}]", pg.background[c], fd))

    assert len(checks) == 3 * len(splat_classes) + 1 + 4 + 3
    for label, analytic, fd in checks:
        tol = 1e-3 * max(abs(fd), abs(analytic)) + 1e-6
        assert abs(analytic - fd) < tol, (label, analytic, fd)


# ------------------------------------------------------ clock offset recovery

def test_camera_clock_offsets_recovered_within_a_millisecond(tmp_path):
    """8 cameras, +-8 ms injected skew: recovered to <1 ms RMS, and the
    calibrated photometric loss drops below a quarter of the skewed one."""
    scene = preset_calibration(str(tmp_path / "rig"), seed=0)
    man = load_manifest(scene.manifest_path)
    cams = man.load_cameras()
    with open(tmp_path / "rig" / "truth.json", encoding="utf-8") as fh:
        truth = json.load(fh)["offsets"]

    opts = RasterOptions(background=man.background.copy(),
                         num_frames=man.num_frames)
    lambda_dssim = LossWeights().lambda_dssim

    def color_total(cameras):
        total = 0.0
        for cam in cameras:
            for k in range(man.num_frames):
                img = man.load_image(cam.cam_id, k)
                res = rasterize(cam, scene.splats,
                                frame_time(k, man.num_frames), opts)
                pred = res.color if cam.color_grid is None \
                    else apply_color_grid(cam.color_grid, res.color)
                total += color_loss(pred, img, lambda_dssim)[0]
        return total

    uncalibrated = color_total(cams)
    cfg = TrainConfig(epochs=4, seed=0, pin_camera=cams[0].cam_id,
                      optimize_grids=False)
    result = calibrate_offsets_only(man, scene.splats, cams, cfg)

    errs_ms = [offset_to_milliseconds(cam.delta_gamma - truth[cam.cam_id],
                                      man.num_frames, man.fps)
               for cam in result.cameras]
    rms = float(np.sqrt(np.mean(np.square(errs_ms))))
    assert rms < 1.0, f"offset RMS {rms:.4f} ms"

    calibrated = color_total(result.cameras)
    assert calibrated < 0.25 * uncalibrated, \
        f"loss ratio {calibrated / uncalibrated:.4f}"


# --------------------------------------------------------- seeding compactness

def test_flow_guided_seeding_is_compact_with_exact_classification(tmp_path):
    """10% moving points at ~2 px/frame over 30 frames: classification is
    exact and the seeded set stays within 15% of one-set-per-frame."""
    rng = np.random.default_rng(21)
    num_frames = 30
    splats, num_static = random_scene(rng, num_static=90, num_dynamic=10,
                                      dynamic_speed=3.4)
    cams = ring_cameras(4, width=48, height=48, focal=64.8,
                        radius=1.0, z_height=3.0)
    scene = write_dataset(str(tmp_path / "scene"), splats, cams, num_frames,
                          fps=30.0, held_out=cams[-1].cam_id)
    man = load_manifest(scene.manifest_path)

    # probe a middle frame where the moving cluster sits fully in view
    k_probe = num_frames // 2 - 1
    inst = evaluate_at_time(splats, frame_time(k_probe, num_frames))
    train_cams = [c for c in cams if c.cam_id != man.held_out_camera]
    flows = {c.cam_id: man.load_flow(c.cam_id, k_probe) for c in train_cams}
    mask = classify_points(inst.position_t, train_cams, flows, InitConfig())
    assert not mask[:num_static].any(), "a static point was flagged as moving"
    assert mask[num_static:].all(), "a moving point was missed"

    # the motion regime really is ~2 px/frame at the probed instant
    speeds = []
    for cam in train_cams:
        x, y = np.transpose([project_point(cam, p)
                             for p in inst.position_t[num_static:]])
        inside = (x >= 0) & (x <= cam.width - 1) & (y >= 0) \
            & (y <= cam.height - 1)
        sampled = flows[cam.cam_id][y[inside].astype(int), x[inside].astype(int)]
        speeds.extend(np.hypot(sampled[:, 0], sampled[:, 1]))
    assert 1.2 < float(np.median(speeds)) < 3.0

    seeded, static_mask = initialize_from_manifest(man, cams)
    assert not static_mask.any()
    per_frame_everything = splats.count * num_frames
    assert 0 < seeded.count <= 0.15 * per_frame_everything, \
        f"{seeded.count} splats vs baseline {per_frame_everything}"


# ------------------------------------------------------------- CLI end to end

def test_cli_pipeline_reaches_quality_and_repeats_bitwise(tmp_path):
    """synth -> init -> train (2016 steps) -> eval >= 30 dB, and the same
    seed writes byte-identical checkpoints twice."""
    d = str(tmp_path / "scene")
    man = f"{d}/manifest.yaml"
    assert main(["synth", "--kind", "scene", "--out", d, "--seed", "3"]) == 0
    assert main(["init", "--manifest", man, "--out", f"{d}/init.ckpt"]) == 0

    # 48 epochs x 7 training cameras x 6 frames = 2016 optimizer steps
    train_args = ["train", "--manifest", man, "--checkpoint", f"{d}/init.ckpt",
                  "--epochs", "48", "--seed", "5", "--pin-camera", "cam0",
                  "--no-grids"]
    assert main(train_args + ["--out", f"{d}/a.ckpt",
                              "--log", f"{d}/a.log"]) == 0
    assert main(train_args + ["--out", f"{d}/b.ckpt"]) == 0
    with open(f"{d}/a.ckpt", "rb") as fh:
        blob_a = fh.read()
    with open(f"{d}/b.ckpt", "rb") as fh:
        blob_b = fh.read()
    assert blob_a == blob_b, "same seed produced different checkpoints"

    with open(f"{d}/a.log", encoding="utf-8") as fh:
        steps = [entry["step"] for entry in json.load(fh)]
    assert max(steps) >= 2000

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        assert main(["eval", "--manifest", man,
                     "--checkpoint", f"{d}/a.ckpt"]) == 0
    rows = json.loads(buf.getvalue())["rows"]
    mean = next(r for r in rows if r["frame"] == "mean")
    assert mean["psnr"] >= 30.0, f"held-out PSNR {mean['psnr']:.2f} dB"


# ------------------------------------------------------------ audio identities

def test_audio_pipeline_matches_closed_form_identities():
    # noiseless triangulation lands on the track to a micrometer
    cams = ring_of_cameras(4, radius=3.0, z=1.4)
    frames = 5
    track_world = np.stack([
        np.linspace(0.25, -0.2, frames),
        np.linspace(-0.1, 0.3, frames),
        np.full(frames, 0.8)], axis=1)
    keypoints = {(c.cam_id, k): project_point(c, track_world[k])
                 for c in cams for k in range(frames)}
    track = triangulate_source(keypoints, cams, frames, cams[0].cam_id)
    mic = cams[0].center()
    assert float(np.abs(track.positions - (track_world - mic)).max()) < 1e-6
    assert np.array_equal(track.times, np.arange(frames) / (frames - 1))

    # azimuth and gain match hand arithmetic to 1e-12
    origin = ListenerPose(0.0, (0.0, 0.0), 0.0)
    assert abs(source_azimuth((0.0, 4.0), origin)) < 1e-12
    assert abs(source_azimuth((-3.0, 0.0), origin) - np.pi / 2) < 1e-12
    assert abs(source_azimuth((3.0, 0.0), origin) + np.pi / 2) < 1e-12
    assert abs(distance_gain((1.0, 2.0), (0.0, 0.0)) - 1.0) < 1e-12
    assert abs(distance_gain((3.0, 4.0), (3.0, 0.0)) - 1.25) < 1e-12

    # binaural synthesis: passthrough, gain and linearity to 1e-6 RMS
    rng = np.random.default_rng(11)
    mono = AudioClip(rng.uniform(-0.6, 0.6, size=48000), 48000)
    still = SourceTrajectory(times=np.array([0.0, 1.0]),
                             positions=np.array([[0.0, 2.0, 0.0]] * 2))
    hrirs = identity_hrirs()

    def rms(x):
        return float(np.sqrt(np.mean(np.square(x))))

    at_mic = [ListenerPose(0.0, (0.0, 0.0), 0.0),
              ListenerPose(1.0, (0.0, 0.0), 0.0)]
    out = binauralize(mono, still, at_mic, hrirs)
    assert rms(out.samples - mono.samples[:, None]) < 1e-6

    behind = [ListenerPose(0.0, (0.0, -2.0), 0.0),
              ListenerPose(1.0, (0.0, -2.0), 0.0)]
    half = binauralize(mono, still, behind, hrirs)
    assert rms(half.samples - 0.5 * mono.samples[:, None]) < 1e-6

    scaled = binauralize(AudioClip(0.37 * mono.samples, 48000), still,
                         at_mic, hrirs)
    assert rms(scaled.samples - 0.37 * out.samples) < 1e-6


# ------------------------------------------------------------- metric parity

def test_quality_metrics_agree_with_independent_implementations():
    """50 random image pairs: psnr and ssim match reimplementations built
    on a different numerical route, to 1e-9."""
    rng = np.random.default_rng(99)
    for _ in range(50):
        h = int(rng.integers(11, 33))
        w = int(rng.integers(11, 33))
        a = rng.uniform(0.0, 1.0, size=(h, w, 3))
        b = np.clip(a + rng.normal(scale=float(rng.uniform(0.01, 0.3)),
                                   size=a.shape), 0.0, 1.0)
        assert abs(psnr(a, b) - reference_psnr(a, b)) < 1e-9
        assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-9


# --------------------------------------------------------------- persistence

def _random_colmap_trio(rng):
    cameras = {}
    for cid in range(1, int(rng.integers(2, 5))):
        cameras[cid] = fileio.ColmapCamera(
            cid, "PINHOLE", int(rng.integers(2, 2000)),
            int(rng.integers(2, 2000)), rng.uniform(1.0, 500.0, size=4))
    images = {}
    for iid in range(1, int(rng.integers(2, 5))):
        q = rng.normal(size=4)
        m = int(rng.integers(0, 6))
        images[iid] = fileio.ColmapImage(
            iid, q / np.linalg.norm(q), rng.normal(size=3),
            int(rng.integers(1, 3)), f"cam{iid}",
            rng.uniform(0.0, 64.0, size=(m, 2)).astype(np.float64),
            rng.integers(-1, 50, size=m).astype(np.int64))
    points = {}
    for pid in range(1, int(rng.integers(2, 6))):
        n_track = int(rng.integers(0, 4))
        points[pid] = fileio.ColmapPoint(
            pid, rng.normal(size=3),
            rng.integers(0, 256, size=3).astype(np.uint8),
            float(rng.uniform(0.0, 2.0)),
            [(int(rng.integers(1, 5)), int(rng.integers(0, 9)))
             for _ in range(n_track)])
    return cameras, images, points


def _random_checkpoint(rng):
    n = int(rng.integers(1, 13))
    sp = empty_splats(n, sh_degree=int(rng.integers(0, 4)))
    sp.position[:] = rng.normal(size=(n, 3)).astype(np.float32)
    q = rng.normal(size=(n, 4))
    sp.rotation[:] = (q / np.linalg.norm(q, axis=1, keepdims=True)) \
        .astype(np.float32).astype(np.float64)
    sp.log_scale[:] = rng.normal(size=(n, 3)).astype(np.float32)
    sp.sh[:] = rng.normal(size=sp.sh.shape).astype(np.float32)
    sp.opacity_logit[:] = rng.normal(size=n).astype(np.float32)
    sp.velocity[:] = rng.normal(size=(n, 3)).astype(np.float32)
    sp.temporal_center[:] = rng.uniform(0.0, 1.0, n).astype(np.float32)
    sp.temporal_extent[:] = rng.uniform(0.1, 2.0, n).astype(np.float32)
    sp.is_static[:] = rng.uniform(size=n) < 0.5
    cals = {}
    for i in range(int(rng.integers(0, 3))):
        grid = BilateralGrid.identity(4, 4, 2, f"cam{i}")
        grid.cells += rng.normal(scale=0.1, size=grid.cells.shape) \
            .astype(np.float32)
        cals[f"cam{i}"] = fileio.CameraCalibration(
            f"cam{i}", float(np.float32(rng.normal(scale=0.01))), grid)
    return sp, cals


def test_file_formats_round_trip_bit_exact_and_reject_garbage(tmp_path):
    rng = np.random.default_rng(123)

    for _ in range(100):
        flow = rng.normal(scale=float(rng.uniform(0.1, 1e4)),
                          size=(int(rng.integers(1, 9)),
                                int(rng.integers(1, 9)), 2)) \
            .astype(np.float32)
        p = str(tmp_path / "x.flo")
        fileio.write_flo(p, flow)
        assert np.array_equal(fileio.read_flo(p), flow)

    for _ in range(100):
        depth = rng.normal(scale=float(rng.uniform(0.1, 1e3)),
                           size=(int(rng.integers(1, 9)),
                                 int(rng.integers(1, 9)))) \
            .astype(np.float32)
        p = str(tmp_path / "x.pfm")
        fileio.write_pfm(p, depth)
        assert np.array_equal(fileio.read_pfm(p), depth)

    for i in range(100):
        channels = 1 + i % 2
        wav = rng.uniform(-1.0, 1.0,
                          size=(int(rng.integers(1, 400)), channels)) \
            .astype(np.float32)
        rate = int(rng.choice([8000, 44100, 48000]))
        p = str(tmp_path / "x.wav")
        fileio.write_wav(p, wav, rate)
        back, back_rate = fileio.read_wav(p)
        assert back_rate == rate
        assert np.array_equal(back, wav.astype(np.float64))

    for _ in range(100):
        sp, cals = _random_checkpoint(rng)
        p = str(tmp_path / "x.ckpt")
        fileio.save_checkpoint(p, sp, cals)
        with open(p, "rb") as fh:
            blob = fh.read()
        ck = fileio.load_checkpoint(p)
        for field in ("position", "rotation", "log_scale", "sh",
                      "opacity_logit", "velocity", "temporal_center",
                      "temporal_extent", "is_static"):
            assert np.array_equal(getattr(ck.splats, field),
                                  getattr(sp, field)), field
        fileio.save_checkpoint(p, ck.splats, ck.calibrations)
        with open(p, "rb") as fh:
            assert fh.read() == blob

    for _ in range(100):
        cameras, images, points = _random_colmap_trio(rng)
        pc = str(tmp_path / "cameras.txt")
        pi = str(tmp_path / "images.txt")
        pp = str(tmp_path / "points3D.txt")
        fileio.write_colmap_cameras(pc, cameras)
        fileio.write_colmap_images(pi, images)
        fileio.write_colmap_points(pp, points)
        rc = fileio.read_colmap_cameras(pc)
        ri = fileio.read_colmap_images(pi)
        rp = fileio.read_colmap_points(pp)
        assert set(rc) == set(cameras) and set(ri) == set(images) \
            and set(rp) == set(points)
        for cid, cam in cameras.items():
            assert np.array_equal(rc[cid].params, cam.params)
        for iid, img in images.items():
            assert np.array_equal(ri[iid].qvec, img.qvec)
            assert np.array_equal(ri[iid].tvec, img.tvec)
            assert np.array_equal(ri[iid].xys, img.xys)
            assert np.array_equal(ri[iid].point3d_ids, img.point3d_ids)
        for pid, pt in points.items():
            assert np.array_equal(rp[pid].xyz, pt.xyz)
            assert np.array_equal(rp[pid].rgb, pt.rgb)
            assert rp[pid].error == pt.error and rp[pid].track == pt.track
        for path, writer, data in ((pc, fileio.write_colmap_cameras, rc),
                                   (pi, fileio.write_colmap_images, ri),
                                   (pp, fileio.write_colmap_points, rp)):
            with open(path, "rb") as fh:
                blob = fh.read()
            writer(path, data)
            with open(path, "rb") as fh:
                assert fh.read() == blob

    # over a mebibyte of hostile bytes: structured rejection, never a crash
    readers = [fileio.read_flo, fileio.read_pfm, fileio.read_wav,
               fileio.read_keypoints, fileio.read_colmap_cameras,
               fileio.read_colmap_images, fileio.read_colmap_points,
               fileio.load_checkpoint]
    magics = [b"", b"RIFF", b"Pf\n", np.float32(202021.25).tobytes(), b"IVV4"]
    consumed = 0
    p = str(tmp_path / "fuzz.bin")
    for trial in range(240):
        blob = rng.bytes(int(rng.integers(1, 10000)))
        if trial % 3 == 0:
            blob = magics[trial % 5] + blob
        consumed += len(blob)
        with open(p, "wb") as fh:
            fh.write(blob)
        for reader in readers:
            try:
                reader(p)
            except FormatError:
                pass  # the only acceptable failure mode
    assert consumed >= 1 << 20


# ------------------------------------------------------------ live service

def test_live_service_conformance(audio_scene):
    """Latest-wins pose handling, strictly increasing sequence numbers,
    exact pose echo, and served frames byte-equal to an offline render."""
    man = audio_scene.manifest
    cams = man.load_cameras()
    svc = RenderService(man, audio_scene.splats, cams, port=0)
    thread = threading.Thread(target=svc.run_forever, daemon=True)
    thread.start()
    frame_seqs = []
    try:
        with socket.create_connection(("127.0.0.1", svc.port),
                                      timeout=15) as sock:
            reader = protocol.MessageReader()

            def next_message():
                msg = protocol.read_message(sock, reader, timeout=15.0)
                assert msg is not None, "server closed the connection"
                return msg

            def drain_until_frame(predicate, timeout=30.0):
                deadline = time.monotonic() + timeout
                while time.monotonic() < deadline:
                    msg_type, payload = next_message()
                    if msg_type != protocol.MSG_FRAME:
                        continue
                    header, jpeg = protocol.decode_frame(payload)
                    frame_seqs.append(header["seq"])
                    if predicate(header):
                        return header, jpeg
                raise AssertionError("no frame matched within the timeout")

            # one unprompted frame opens the session
            msg_type, payload = next_message()
            assert msg_type == protocol.MSG_FRAME
            header, _ = protocol.decode_frame(payload)
            frame_seqs.append(header["seq"])
            assert header["seq"] == 1

            # exact echo of a client pose, and frame bytes equal to an
            # offline render of that very pose through the same encoder
            sent = dict(position=[0.5, -2.0, 1.5],
                        orientation=[1.0, 0.0, 0.0, 0.0],
                        t=0.375, fov_y=0.8, width=44, height=36)
            sock.sendall(protocol.encode_pose(**sent))
            header, jpeg = drain_until_frame(
                lambda h: h["pose"]["t"] == sent["t"])
            pose = header["pose"]
            assert pose["position"] == sent["position"]
            assert pose["orientation"] == sent["orientation"]
            assert pose["fov_y"] == sent["fov_y"]
            assert (header["width"], header["height"]) == (44, 36)
            assert header["t"] == sent["t"]
            camera = pose_to_camera(pose, 1.0)
            offline = rasterize(camera, audio_scene.splats, header["t"],
                                svc.opts)
            assert jpeg == encode_jpeg(offline.color)

            # a burst of poses coalesces: far fewer frames than poses, and
            # the stream settles on the final pose
            n_burst = 60
            for i in range(n_burst):
                sock.sendall(protocol.encode_pose(
                    [0.0, -2.0, 1.25], [1.0, 0.0, 0.0, 0.0],
                    t=i / 128.0, fov_y=0.9, width=48, height=48))
            before = len(frame_seqs)
            drain_until_frame(
                lambda h: h["pose"]["t"] == (n_burst - 1) / 128.0)
            rendered = len(frame_seqs) - before
            assert rendered < n_burst // 2, \
                f"{rendered} frames for {n_burst} poses"

            # playback: audio blocks arrive with strictly increasing seqs
            sock.sendall(protocol.encode_control("play"))
            audio_seqs = []
            deadline = time.monotonic() + 30.0
            while len(audio_seqs) < 6 and time.monotonic() < deadline:
                msg_type, payload = next_message()
                if msg_type == protocol.MSG_AUDIO:
                    h, samples = protocol.decode_audio(payload)
                    audio_seqs.append(h["seq"])
                    assert samples.shape == (256, 2)
                elif msg_type == protocol.MSG_FRAME:
                    frame_seqs.append(protocol.decode_frame(payload)[0]["seq"])
            assert len(audio_seqs) >= 6
            assert all(b > a for a, b in zip(audio_seqs, audio_seqs[1:]))
            sock.sendall(protocol.encode_control("pause"))
    finally:
        svc.close()
        thread.join(timeout=5.0)

    assert all(b > a for a, b in zip(frame_seqs, frame_seqs[1:])), \
        "frame sequence numbers are not strictly increasing"
