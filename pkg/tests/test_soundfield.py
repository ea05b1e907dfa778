"""Source triangulation, spatial mapping, and binaural rendering."""
import warnings

import numpy as np
import pytest

from testkit import look_at_camera, project_point
from volvid.soundfield import (AudioClip, HrirSet, ListenerPose,
                               SourceTrajectory, binauralize, distance_gain,
                               identity_hrirs, load_hrir_manifest,
                               save_hrir_manifest, select_hrir,
                               source_azimuth, synthesize_hrtf,
                               triangulate_point, triangulate_source)


@pytest.fixture(scope="module")
def ring():
    return [look_at_camera(f"c{i}",
                           (2 * np.cos(a), 2 * np.sin(a), 1.0),
                           width=640, height=480, focal=500.0)
            for i, a in enumerate(np.linspace(0.0, 1.5 * np.pi, 4))]


@pytest.fixture(scope="module")
def noise_clip():
    x = np.random.default_rng(11).uniform(-0.6, 0.6, size=48000)
    return AudioClip(samples=x, sample_rate=48000)


@pytest.fixture(scope="module")
def ahead():
    # static source one unit ahead of the mic origin, listener at the mic
    traj = SourceTrajectory(times=np.array([0.0, 1.0]),
                            positions=np.array([[0.0, 1.0, 0.0],
                                                [0.0, 1.0, 0.0]]))
    poses = [ListenerPose(t=0.0, position=np.zeros(2), yaw=0.0),
             ListenerPose(t=1.0, position=np.zeros(2), yaw=0.0)]
    return traj, poses


def test_triangulation_recovers_noiseless_point(ring):
    pt = np.array([0.2, -0.1, 0.4])
    obs = [(c, *project_point(c, pt)) for c in ring]
    assert np.linalg.norm(triangulate_point(obs) - pt) < 1e-6


def test_triangulation_rejects_degenerate_baseline():
    # the point lies on the line joining both camera centers
    c1 = look_at_camera("a", (2.0, 0.0, 0.0), target=(-1.0, 0.0, 0.0),
                        width=640, height=480, focal=500.0)
    c2 = look_at_camera("b", (3.0, 0.0, 0.0), target=(-1.0, 0.0, 0.0),
                        width=640, height=480, focal=500.0)
    p = np.zeros(3)
    obs = [(c1, *project_point(c1, p)), (c2, *project_point(c2, p))]
    assert triangulate_point(obs) is None


def test_triangulation_noise_stays_bounded(ring, rng):
    pt = np.array([0.2, -0.1, 0.4])
    errs = []
    for _ in range(200):
        obs = []
        for c in ring:
            x, y = project_point(c, pt)
            obs.append((c, x + rng.normal(0.0, 1.0), y + rng.normal(0.0, 1.0)))
        errs.append(np.linalg.norm(triangulate_point(obs) - pt))
    assert np.sqrt(np.mean(np.square(errs))) < 0.02


def test_trajectory_interpolates_gaps_mic_relative(ring):
    base = np.array([0.2, -0.1, 0.4])
    truth = [base + np.array([0.01 * k, 0.0, 0.0]) for k in range(5)]
    kp = {}
    for k in range(5):
        if k == 2:
            continue  # unobserved frame
        for c in ring:
            kp[(c.cam_id, k)] = project_point(c, truth[k])
    tr = triangulate_source(kp, ring, num_frames=5, mic_cam_id="c0")
    mic = ring[0].center()
    for k in (0, 1, 3, 4):
        assert np.linalg.norm(tr.positions[k] - (truth[k] - mic)) < 1e-6
    gap = (truth[1] + truth[3]) / 2 - mic
    assert np.linalg.norm(tr.positions[2] - gap) < 1e-6
    assert np.allclose(tr.times, np.arange(5) / 4.0)


def test_trajectory_requires_some_observation(ring):
    with pytest.raises(ValueError):
        triangulate_source({}, ring, num_frames=3, mic_cam_id="c0")
    with pytest.raises(ValueError):
        triangulate_source({("c0", 0): (1.0, 1.0)}, ring, num_frames=3,
                           mic_cam_id="nope")


def test_azimuth_reference_directions():
    listener = ListenerPose(t=0.0, position=np.zeros(2), yaw=0.0)
    assert abs(source_azimuth(np.array([0.0, 1.0]), listener)) < 1e-15
    assert abs(source_azimuth(np.array([-1.0, 0.0]), listener)
               - np.pi / 2) < 1e-15
    assert abs(source_azimuth(np.array([1.0, 0.0]), listener)
               + np.pi / 2) < 1e-15


def test_azimuth_rotational_equivariance(rng):
    for _ in range(50):
        s = rng.normal(size=2) * 3
        listener = ListenerPose(t=0.0, position=rng.normal(size=2),
                                yaw=rng.uniform(-np.pi, np.pi))
        if np.linalg.norm(s - listener.position) < 0.2:
            continue
        base = source_azimuth(s, listener)
        a = rng.uniform(-np.pi, np.pi)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        turned = ListenerPose(t=0.0, position=rot @ listener.position,
                              yaw=listener.yaw + a)
        assert abs(source_azimuth(rot @ s, turned) - base) < 1e-12


def test_azimuth_magnitude_matches_arccos(rng):
    for _ in range(100):
        s = rng.normal(size=2) * 3
        listener = ListenerPose(t=0.0, position=rng.normal(size=2),
                                yaw=rng.uniform(-np.pi, np.pi))
        v = s - listener.position
        if np.linalg.norm(v) < 0.2:
            continue
        fwd = np.array([-np.sin(listener.yaw), np.cos(listener.yaw)])
        ref = np.arccos(np.clip(v @ fwd / np.linalg.norm(v), -1.0, 1.0))
        assert abs(abs(source_azimuth(s, listener)) - ref) < 1e-12


def test_azimuth_holds_previous_when_source_is_on_top():
    listener = ListenerPose(t=0.0, position=np.zeros(2), yaw=0.0)
    assert source_azimuth(np.array([0.01, 0.0]), listener, previous=0.7) == 0.7


def test_distance_gain_examples():
    assert distance_gain(np.array([1.0, 2.0]), np.zeros(2)) == 1.0
    assert abs(distance_gain(np.array([3.0, 4.0]), np.array([3.0, 0.0]))
               - 1.25) < 1e-15


def test_distance_gain_scale_invariant():
    s = np.array([0.7, -0.4])
    listener = np.array([0.2, 0.3])
    g = distance_gain(s, listener)
    assert abs(distance_gain(3 * s, 3 * listener) - g) < 1e-12


def test_select_hrir_picks_nearest_azimuth():
    hs = HrirSet(sample_rate=48000,
                 azimuths_deg=np.array([-90.0, 0.0, 90.0]),
                 left=np.eye(3), right=np.eye(3) * 2)

    def pick(theta_deg):
        left, right = select_hrir(hs, np.radians(theta_deg))
        assert np.array_equal(right, left * 2)
        return int(np.argmax(left))

    assert pick(10) == 1
    assert pick(50) == 2
    assert pick(45) == 1  # tie resolves to the lower index
    assert pick(-50) == 0


def test_binauralize_identity_is_transparent(noise_clip, ahead):
    traj, poses = ahead
    out = binauralize(noise_clip, traj, poses, identity_hrirs())
    assert out.samples.shape == (noise_clip.samples.shape[0], 2)
    err = out.samples - noise_clip.samples[:, None]
    assert np.sqrt(np.mean(err ** 2, axis=0)).max() < 1e-6


def test_binauralize_distance_halves_gain(noise_clip, ahead):
    traj, _ = ahead
    # |source| = 1 and |source - listener| = 2 gives gain 1/2
    poses = [ListenerPose(t=0.0, position=np.array([0.0, 3.0]), yaw=0.0),
             ListenerPose(t=1.0, position=np.array([0.0, 3.0]), yaw=0.0)]
    out = binauralize(noise_clip, traj, poses, identity_hrirs())
    err = out.samples - 0.5 * noise_clip.samples[:, None]
    assert np.sqrt(np.mean(err ** 2, axis=0)).max() < 1e-6


def test_binauralize_is_linear_in_input(noise_clip, ahead):
    traj, poses = ahead
    ident = identity_hrirs()
    out = binauralize(noise_clip, traj, poses, ident)
    scaled = AudioClip(samples=0.37 * noise_clip.samples, sample_rate=48000)
    out_s = binauralize(scaled, traj, poses, ident)
    assert np.max(np.abs(out_s.samples - 0.37 * out.samples)) < 1e-6


def test_binauralize_lateral_source_favours_near_ear(noise_clip, ahead):
    _, poses = ahead
    hrtf = synthesize_hrtf(np.arange(-180, 181, 30), 48000)
    left_traj = SourceTrajectory(times=np.array([0.0, 1.0]),
                                 positions=np.array([[-1.0, 0.0, 0.0],
                                                     [-1.0, 0.0, 0.0]]))
    out = binauralize(noise_clip, left_traj, poses, hrtf)
    rms = np.sqrt(np.mean(out.samples ** 2, axis=0))
    assert rms[0] > rms[1] * 1.2


def test_binauralize_center_source_is_symmetric(noise_clip, ahead):
    traj, poses = ahead
    hrtf = synthesize_hrtf(np.arange(-180, 181, 30), 48000)
    out = binauralize(noise_clip, traj, poses, hrtf)
    rms = np.sqrt(np.mean(out.samples ** 2, axis=0))
    assert abs(rms[0] / rms[1] - 1.0) < 1e-6


def test_binauralize_rejects_short_pose_track(noise_clip, ahead):
    traj, _ = ahead
    short = [ListenerPose(t=0.0, position=np.zeros(2), yaw=0.0),
             ListenerPose(t=0.5, position=np.zeros(2), yaw=0.0)]
    with pytest.raises(ValueError):
        binauralize(noise_clip, traj, short, identity_hrirs())


def test_binauralize_rejects_sample_rate_mismatch(noise_clip, ahead):
    traj, poses = ahead
    with pytest.raises(ValueError):
        binauralize(noise_clip, traj, poses, identity_hrirs(sample_rate=44100))


def test_hrir_manifest_round_trip(tmp_path):
    hrtf = synthesize_hrtf(np.arange(-180, 181, 30), 48000)
    path = save_hrir_manifest(str(tmp_path), hrtf)
    back = load_hrir_manifest(path)
    assert back.sample_rate == hrtf.sample_rate
    assert np.array_equal(back.azimuths_deg, hrtf.azimuths_deg)
    # wav payloads are float32, stored losslessly
    assert np.max(np.abs(back.left - hrtf.left.astype(np.float32))) == 0
    assert np.max(np.abs(back.right - hrtf.right.astype(np.float32))) == 0


def test_binauralize_warns_and_bounds_on_clipping(noise_clip, ahead):
    traj, _ = ahead
    loud = AudioClip(samples=np.clip(noise_clip.samples * 8, -1, 1),
                     sample_rate=48000)
    near = [ListenerPose(t=0.0, position=np.array([0.0, 0.95]), yaw=0.0),
            ListenerPose(t=1.0, position=np.array([0.0, 0.95]), yaw=0.0)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = binauralize(loud, traj, near, identity_hrirs())
    assert any("clipped" in str(w.message) for w in caught)
    assert np.max(np.abs(out.samples)) <= 1.0
