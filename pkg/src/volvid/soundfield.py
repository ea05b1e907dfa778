"""Closed-form binaural audio from a mono recording.

Pipeline: triangulate the dominant source per frame from multi-view 2D
keypoints, express it in the microphone's ground-plane frame, then per STFT
frame steer a mono clip with an azimuth-selected HRIR pair and a distance
gain. No learning anywhere; everything is deterministic geometry + DSP.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import istft, stft

from . import fileio
from .raster import CameraModel

DISTANCE_EPSILON = 0.1     # meters; guards the gain ratio near coincidence
STFT_WINDOW = 1024
STFT_HOP = 256
SPEED_OF_SOUND = 343.0     # m/s
DEFAULT_HEAD_RADIUS = 0.0875  # meters


@dataclass
class SourceTrajectory:
    """Per-frame world-space source positions in the mic-origin frame."""

    times: np.ndarray      # (F,) normalized, nondecreasing
    positions: np.ndarray  # (F, 3)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.times.ndim != 1 or self.positions.shape != (self.times.size, 3):
            raise ValueError("trajectory wants (F,) times and (F, 3) positions")
        if self.times.size == 0:
            raise ValueError("trajectory must contain at least one sample")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("trajectory times must be nondecreasing")
        if not np.isfinite(self.positions).all():
            raise ValueError("trajectory positions must be finite")

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation; endpoints held outside the sampled range."""
        return np.array([
            np.interp(t, self.times, self.positions[:, i]) for i in range(3)])


@dataclass
class ListenerPose:
    t: float
    position: np.ndarray  # (x, y) meters in the mic-origin ground plane
    yaw: float            # radians, counterclockwise deviation from +y

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        if not (np.isfinite(self.position).all()
                and np.isfinite(self.t) and np.isfinite(self.yaw)):
            raise ValueError("listener pose must be finite")


@dataclass
class HrirSet:
    """Azimuth-indexed impulse-response pairs for the two ears."""

    sample_rate: int
    azimuths_deg: np.ndarray  # (K,), signed degrees in [-180, 180]
    left: np.ndarray          # (K, L)
    right: np.ndarray         # (K, L)

    def __post_init__(self) -> None:
        self.azimuths_deg = np.asarray(self.azimuths_deg, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        k = self.azimuths_deg.size
        if k < 2:
            raise ValueError("need at least two azimuth entries")
        if self.left.shape != self.right.shape or self.left.shape[0] != k:
            raise ValueError("impulse responses must be (K, L) for both ears")


@dataclass
class AudioClip:
    samples: np.ndarray  # (n,) mono or (n, 2) stereo, float in [-1, 1]
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.isfinite(self.samples).all():
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


# ------------------------------------------------------------- triangulation

def triangulate_point(observations: list[tuple[CameraModel, float, float]],
                      rank_tol: float = 1e-10) -> np.ndarray | None:
    """Linear (DLT) triangulation minimizing algebraic error.

    Returns the world point, or None when the system is rank-deficient
    (observations on a shared baseline) or the solution sits at infinity.
    """
    if len(observations) < 2:
        return None
    rows = []
    for cam, x, y in observations:
        k = np.array([[cam.fx, 0.0, cam.cx],
                      [0.0, cam.fy, cam.cy],
                      [0.0, 0.0, 1.0]])
        p = k @ np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
        rows.append(x * p[2] - p[0])
        rows.append(y * p[2] - p[1])
    a = np.stack(rows)
    _, s, vt = np.linalg.svd(a)
    if s[-2] < rank_tol * s[0]:
        return None
    h = vt[-1]
    if abs(h[3]) < 1e-12 * np.linalg.norm(h):
        return None
    return h[:3] / h[3]


def triangulate_source(
        keypoints: dict[tuple[str, int], tuple[float, float]],
        cameras: list[CameraModel],
        num_frames: int,
        mic_cam_id: str) -> SourceTrajectory:
    """Per-frame DLT over all observing cameras, gaps linearly interpolated.

    Positions come back translated into the mic camera's origin (world axes).
    Frames observed by fewer than two cameras, or whose system is degenerate,
    are filled from neighbors; endpoints are held.
    """
    by_id = {c.cam_id: c for c in cameras}
    if mic_cam_id not in by_id:
        raise ValueError(f"unknown mic camera {mic_cam_id!r}")
    mic_center = by_id[mic_cam_id].center()
    positions = np.full((num_frames, 3), np.nan)
    for k in range(num_frames):
        obs = [(by_id[cid], x, y) for (cid, f), (x, y) in keypoints.items()
               if f == k and cid in by_id]
        point = triangulate_point(obs) if len(obs) >= 2 else None
        if point is not None:
            positions[k] = point - mic_center
    valid = np.isfinite(positions[:, 0])
    if not valid.any():
        raise ValueError("no frame could be triangulated")
    idx = np.arange(num_frames, dtype=np.float64)
    for i in range(3):
        positions[:, i] = np.interp(idx, idx[valid], positions[valid, i])
    times = idx / max(num_frames - 1, 1)
    return SourceTrajectory(times=times, positions=positions)


# ------------------------------------------------------------ angle and gain

def source_azimuth(source_xy: np.ndarray, listener: ListenerPose,
                   previous: float = 0.0) -> float:
    """Signed horizontal angle of the source, positive on the listener's left.

    Magnitude is the angle between the facing direction and the offset to
    the source; the 2D cross product supplies the side. When the source and
    listener coincide (within the distance guard) the previous value holds.
    """
    v1 = np.asarray(source_xy, dtype=np.float64).reshape(2) - listener.position
    if np.hypot(v1[0], v1[1]) <= DISTANCE_EPSILON:
        return float(previous)
    v2 = np.array([-np.sin(listener.yaw), np.cos(listener.yaw)])
    cross = v2[0] * v1[1] - v2[1] * v1[0]
    dot = v2 @ v1
    return float(np.arctan2(cross, dot))


def distance_gain(source_xy: np.ndarray, listener_xy: np.ndarray) -> float:
    """Loudness ratio: mic-origin distance over listener distance, clamped."""
    s = np.asarray(source_xy, dtype=np.float64).reshape(2)
    dist = np.linalg.norm(s - np.asarray(listener_xy, dtype=np.float64).reshape(2))
    return float(np.linalg.norm(s) / max(dist, DISTANCE_EPSILON))


def select_hrir(hrirs: HrirSet, azimuth_rad: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest entry by circular angle distance; ties pick the smaller azimuth."""
    if not np.isfinite(azimuth_rad):
        raise ValueError("azimuth must be finite")
    deg = np.degrees(azimuth_rad)
    diff = np.abs((hrirs.azimuths_deg - deg + 180.0) % 360.0 - 180.0)
    order = np.lexsort((hrirs.azimuths_deg, diff))
    best = order[0]
    return hrirs.left[best], hrirs.right[best]


# ---------------------------------------------------------------- synthesis

def binauralize(mono: AudioClip, source: SourceTrajectory,
                listener_poses: list[ListenerPose],
                hrirs: HrirSet) -> AudioClip:
    """Steer a mono clip into stereo with per-STFT-frame HRIR filtering.

    Each short-time frame is multiplied by the frequency response of the
    HRIR selected for the azimuth at the frame's center time, scaled by the
    distance gain, then resynthesized by inverse STFT. Output is clipped to
    [-1, 1] with a warning counting clipped samples.
    """
    samples = mono.samples
    if samples.ndim == 2:
        if samples.shape[1] != 1:
            raise ValueError("binauralize wants a mono input clip")
        samples = samples[:, 0]
    if hrirs.sample_rate != mono.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: clip {mono.sample_rate} Hz vs "
            f"impulse responses {hrirs.sample_rate} Hz (no resampling)")
    if hrirs.left.shape[1] > STFT_WINDOW:
        raise ValueError("impulse responses longer than the analysis window")
    if not listener_poses:
        raise ValueError("need at least one listener pose")
    poses = sorted(listener_poses, key=lambda p: p.t)
    duration = mono.duration
    if poses[-1].t < 1.0 - 1e-9:
        raise ValueError("listener poses do not cover the clip duration")

    pose_t = np.array([p.t for p in poses])
    pose_xy = np.stack([p.position for p in poses])
    pose_yaw = np.array([p.yaw for p in poses])

    def listener_at(t: float) -> ListenerPose:
        return ListenerPose(
            t=t,
            position=np.array([np.interp(t, pose_t, pose_xy[:, 0]),
                               np.interp(t, pose_t, pose_xy[:, 1])]),
            yaw=float(np.interp(t, pose_t, pose_yaw)))

    freqs, times, spec = stft(samples, fs=mono.sample_rate, window="hann",
                              nperseg=STFT_WINDOW, noverlap=STFT_WINDOW - STFT_HOP,
                              boundary="zeros", padded=True)
    out = np.zeros((2,) + spec.shape, dtype=spec.dtype)
    prev_azimuth = 0.0
    for j, t_sec in enumerate(times):
        t = min(max(t_sec / duration, 0.0), 1.0) if duration > 0 else 0.0
        listener = listener_at(t)
        src_xy = source.at(t)[:2]
        prev_azimuth = source_azimuth(src_xy, listener, prev_azimuth)
        gain = distance_gain(src_xy, listener.position)
        left_ir, right_ir = select_hrir(hrirs, prev_azimuth)
        out[0, :, j] = spec[:, j] * (gain * np.fft.rfft(left_ir, STFT_WINDOW))
        out[1, :, j] = spec[:, j] * (gain * np.fft.rfft(right_ir, STFT_WINDOW))

    stereo = np.zeros((samples.shape[0], 2))
    for ch in range(2):
        _, rec = istft(out[ch], fs=mono.sample_rate, window="hann",
                       nperseg=STFT_WINDOW, noverlap=STFT_WINDOW - STFT_HOP,
                       boundary=True)
        stereo[:, ch] = rec[: samples.shape[0]]
    clipped = int(np.count_nonzero(np.abs(stereo) > 1.0))
    if clipped:
        warnings.warn(f"binaural output clipped at {clipped} samples")
        stereo = np.clip(stereo, -1.0, 1.0)
    return AudioClip(samples=stereo, sample_rate=mono.sample_rate)


# ------------------------------------------------------- hrir set on disk

def load_hrir_manifest(path) -> HrirSet:
    """Text manifest: lines of "azimuth_deg left.wav right.wav".

    Audio paths are relative to the manifest's directory; every file must be
    mono and share one sample rate.
    """
    base = os.path.dirname(os.path.abspath(path))
    azimuths, lefts, rights = [], [], []
    rate = None
    for lineno, line in enumerate(fileio._read_text_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise fileio.FormatError(
                f"hrir manifest line {lineno}: expected 'azimuth left right'")
        try:
            az = float(parts[0])
        except ValueError as exc:
            raise fileio.FormatError(f"hrir manifest line {lineno}: {exc}") from exc
        pair = []
        for rel in parts[1:]:
            samples, r = fileio.read_wav(os.path.join(base, rel))
            if samples.shape[1] != 1:
                raise fileio.FormatError(f"{rel}: impulse responses must be mono")
            if rate is None:
                rate = r
            elif r != rate:
                raise fileio.FormatError(
                    f"{rel}: sample rate {r} differs from {rate}")
            pair.append(samples[:, 0])
        azimuths.append(az)
        lefts.append(pair[0])
        rights.append(pair[1])
    if len(azimuths) < 2:
        raise fileio.FormatError("hrir manifest needs at least two azimuths")
    length = max(len(v) for v in lefts + rights)
    left = np.zeros((len(azimuths), length))
    right = np.zeros((len(azimuths), length))
    for i, (lv, rv) in enumerate(zip(lefts, rights)):
        left[i, : len(lv)] = lv
        right[i, : len(rv)] = rv
    return HrirSet(sample_rate=int(rate), azimuths_deg=np.array(azimuths),
                   left=left, right=right)


def save_hrir_manifest(directory, hrirs: HrirSet,
                       manifest_name: str = "manifest.txt") -> str:
    os.makedirs(directory, exist_ok=True)
    lines = ["# azimuth_deg left_wav right_wav"]
    for i, az in enumerate(hrirs.azimuths_deg):
        ln = f"az{i:03d}_L.wav"
        rn = f"az{i:03d}_R.wav"
        fileio.write_wav(os.path.join(directory, ln), hrirs.left[i],
                         hrirs.sample_rate, "float32")
        fileio.write_wav(os.path.join(directory, rn), hrirs.right[i],
                         hrirs.sample_rate, "float32")
        lines.append(f"{float(az)!r} {ln} {rn}")
    path = os.path.join(directory, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def synthesize_hrtf(azimuths_deg: np.ndarray | list[float],
                    sample_rate: int = 48000,
                    head_radius: float = DEFAULT_HEAD_RADIUS,
                    length: int = 64,
                    ild_strength: float = 0.6) -> HrirSet:
    """Spherical-head stand-in for a measured set: pure delay plus level cue.

    The interaural delay follows the classic rigid-sphere path-length model
    (radius/c times angle plus its sine); the level difference is a smooth
    monotonic gain on each ear. Fractional delays land on two taps by linear
    interpolation so the set works at any rate.
    """
    azimuths = np.asarray(azimuths_deg, dtype=np.float64)
    k = azimuths.size
    left = np.zeros((k, length))
    right = np.zeros((k, length))
    base_delay = 4.0  # taps; headroom so a leading ear never needs t < 0
    for i, az in enumerate(azimuths):
        theta = np.radians(az)
        itd = (head_radius / SPEED_OF_SOUND) * (np.abs(np.sin(theta))
                                                + np.abs(theta))
        shift = itd * sample_rate
        sin_t = np.sin(theta)
        gains = {
            "left": np.sqrt(max(1.0 + ild_strength * sin_t, 0.0)),
            "right": np.sqrt(max(1.0 - ild_strength * sin_t, 0.0)),
        }
        delays = {
            "left": base_delay + (shift if sin_t < 0 else 0.0),
            "right": base_delay + (shift if sin_t > 0 else 0.0),
        }
        for ear, buf in (("left", left), ("right", right)):
            d = delays[ear]
            lo = int(np.floor(d))
            frac = d - lo
            if lo + 1 >= length:
                raise ValueError("impulse length too short for the delay")
            buf[i, lo] = gains[ear] * (1.0 - frac)
            buf[i, lo + 1] = gains[ear] * frac
    return HrirSet(sample_rate=sample_rate, azimuths_deg=azimuths,
                   left=left, right=right)


def identity_hrirs(sample_rate: int = 48000, length: int = 8) -> HrirSet:
    """Two-entry unit-impulse set: binauralize becomes a passthrough."""
    left = np.zeros((2, length))
    right = np.zeros((2, length))
    left[:, 0] = 1.0
    right[:, 0] = 1.0
    return HrirSet(sample_rate=sample_rate,
                   azimuths_deg=np.array([-90.0, 90.0]), left=left, right=right)
