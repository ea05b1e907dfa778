"""Command-line surface: exit codes and the files each command leaves behind."""
import json
import os

import numpy as np
import pytest

from volvid import fileio
from volvid.cli import main
from volvid.fileio import load_checkpoint
from volvid.manifest import load_manifest


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One small scene plus an initial checkpoint, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    scene = str(root / "scene")
    code = main(["synth", "--kind", "scene", "--out", scene, "--seed", "11",
                 "--cameras", "4", "--size", "40", "--frames", "3",
                 "--static", "25", "--dynamic", "3"])
    assert code == 0
    ckpt = str(root / "init.ckpt")
    code = main(["init", "--manifest", f"{scene}/manifest.yaml",
                 "--out", ckpt])
    assert code == 0
    return root


def _manifest(workdir):
    return str(workdir / "scene" / "manifest.yaml")


def test_synth_then_init_left_valid_files(workdir):
    man = load_manifest(_manifest(workdir))
    assert man.num_frames == 3
    ckpt = load_checkpoint(str(workdir / "init.ckpt"))
    assert ckpt.splats.count > 0
    assert set(ckpt.calibrations) == {c.cam_id for c in man.load_cameras()}


def test_synth_calibration_kind_writes_truth(tmp_path):
    out = str(tmp_path / "cal")
    assert main(["synth", "--kind", "calibration", "--out", out,
                 "--cameras", "3", "--frames", "6", "--seed", "2"]) == 0
    with open(os.path.join(out, "truth.json")) as fh:
        truth = json.load(fh)
    assert truth["offsets"]["cam0"] == 0.0
    assert len(truth["offsets"]) == 3


def test_train_writes_checkpoint_state_and_log(workdir, tmp_path):
    out = str(tmp_path / "trained.ckpt")
    state = str(tmp_path / "state.npz")
    log = str(tmp_path / "log.json")
    code = main(["train", "--manifest", _manifest(workdir),
                 "--checkpoint", str(workdir / "init.ckpt"),
                 "--out", out, "--epochs", "1", "--seed", "4",
                 "--save-state", state, "--log", log])
    assert code == 0
    trained = load_checkpoint(out)
    assert trained.splats.count > 0
    assert os.path.exists(state)
    with open(log) as fh:
        rows = json.load(fh)
    assert rows and {"step", "total", "color"} <= set(rows[0])


def test_render_writes_requested_channels(workdir, tmp_path):
    base = str(tmp_path / "frame.png")
    code = main(["render", "--manifest", _manifest(workdir),
                 "--checkpoint", str(workdir / "init.ckpt"),
                 "--camera", "cam0", "--time", "0.5",
                 "--channels", "color,depth,flow", "--out", base])
    assert code == 0
    img = fileio.read_image(base)
    assert img.shape == (40, 40, 3)
    assert fileio.read_pfm(str(tmp_path / "frame.depth.pfm")).shape == (40, 40)
    assert fileio.read_flo(str(tmp_path / "frame.flow.flo")).shape == (40, 40, 2)


def test_render_pose_file_renders_one_frame_per_line(workdir, tmp_path):
    poses = tmp_path / "poses.txt"
    poses.write_text("# t x y z tx ty tz\n"
                     "0.0 0.0 -2.0 2.0 0.0 0.0 0.0\n"
                     "1.0 0.5 -2.0 2.0 0.0 0.0 0.0\n")
    out = str(tmp_path / "frames")
    code = main(["render", "--manifest", _manifest(workdir),
                 "--checkpoint", str(workdir / "init.ckpt"),
                 "--pose-file", str(poses), "--out", out])
    assert code == 0
    assert sorted(os.listdir(out)) == ["000000.png", "000001.png"]


def test_render_flag_problems_exit_2(workdir, tmp_path):
    common = ["render", "--manifest", _manifest(workdir),
              "--checkpoint", str(workdir / "init.ckpt"),
              "--out", str(tmp_path / "x.png")]
    assert main(common + ["--camera", "cam0", "--channels", "nope"]) == 2
    assert main(common + ["--camera", "cam0", "--time", "1.5"]) == 2
    assert main(common + ["--camera", "ghost"]) == 2
    assert main(common) == 2  # neither --camera nor --pose-file


def test_render_malformed_pose_file_exits_1(workdir, tmp_path):
    poses = tmp_path / "bad.txt"
    poses.write_text("0.0 1.0 2.0\n")
    code = main(["render", "--manifest", _manifest(workdir),
                 "--checkpoint", str(workdir / "init.ckpt"),
                 "--pose-file", str(poses), "--out", str(tmp_path / "d")])
    assert code == 1


def test_eval_prints_json_per_frame(workdir, capsys):
    code = main(["eval", "--manifest", _manifest(workdir),
                 "--checkpoint", str(workdir / "init.ckpt")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["held_out_camera"] == "cam3"
    frames = [r for r in report["rows"] if r["frame"] != "mean"]
    assert len(frames) == 3
    assert all(np.isfinite(r["psnr"]) and 0 <= r["ssim"] <= 1 for r in frames)


def test_missing_inputs_exit_1(workdir, tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "nope.yaml"),
                 "--checkpoint", str(workdir / "init.ckpt")]) == 1
    garbage = tmp_path / "junk.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["eval", "--manifest", _manifest(workdir),
                 "--checkpoint", str(garbage)]) == 1


def test_init_without_flow_maps_exits_2(workdir, tmp_path):
    import shutil

    root = str(tmp_path / "noflow")
    shutil.copytree(str(workdir / "scene"), root)
    man_path = os.path.join(root, "manifest.yaml")
    with open(man_path) as fh:
        lines = [ln for ln in fh if "flows:" not in ln]
    with open(man_path, "w") as fh:
        fh.writelines(lines)
    assert main(["init", "--manifest", man_path,
                 "--out", os.path.join(root, "x.ckpt")]) == 2


def test_sonify_writes_stereo_wav(tmp_path):
    scene = str(tmp_path / "audio")
    assert main(["synth", "--kind", "audio", "--out", scene,
                 "--seed", "3"]) == 0
    poses = tmp_path / "listener.txt"
    poses.write_text("0.0 0.0 0.0 0.0\n1.0 0.2 0.1 0.3\n")
    out = str(tmp_path / "binaural.wav")
    assert main(["sonify", "--manifest", f"{scene}/manifest.yaml",
                 "--listener-poses", str(poses), "--out", out]) == 0
    samples, rate = fileio.read_wav(out)
    assert samples.shape[1] == 2 and rate == 48000
    assert np.abs(samples).max() <= 1.0


def test_missing_required_flag_raises_system_exit():
    with pytest.raises(SystemExit):
        main(["render", "--manifest", "x"])
