"""Readers and writers for every on-disk format the pipeline touches.

All parsers raise FormatError (never crash) on malformed input, and every
writer/reader pair round-trips bit-exactly at its storage precision.

Formats:
  * .flo optical flow  little-endian, magic float 202021.25, i32 dims,
    row-major interleaved (u, v) float32
  * .pfm depth         grayscale "Pf" only, scale sign encodes endianness,
    rows stored bottom-up
  * .wav audio         16-bit PCM (mapped to [-1, 1) via /32768) and IEEE
    float32; anything else is rejected
  * keypoint tracks    text lines "camera_id frame_index x y confidence"
  * sparse reconstruction text triplet (cameras/images/points)
  * checkpoints        "IVV4" binary, layout documented at save_checkpoint
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .objective import BilateralGrid
from .raster import CameraModel
from .scene import SplatSet

FLO_MAGIC = 202021.25
CHECKPOINT_MAGIC = b"IVV4"
CHECKPOINT_VERSION = 1
MAX_DIM = 1 << 20  # sanity bound on parsed image/flow dimensions


class FormatError(ValueError):
    """Structured parse failure: bad magic, truncation, unsupported variant."""


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def _read_text_lines(path) -> list[str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return raw.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path} is not utf-8 text: {exc}") from exc


# ---------------------------------------------------------------- flow maps

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be HxWx2")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = _read_exact(fh, 12, "flow header")
        magic, w, h = struct.unpack("<fii", header)
        if magic != FLO_MAGIC:
            raise FormatError(f"bad flow magic {magic!r}")
        if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
            raise FormatError(f"implausible flow dimensions {w}x{h}")
        data = _read_exact(fh, w * h * 8, "flow payload")
        extra = fh.read(1)
        if extra:
            raise FormatError("trailing bytes after flow payload")
    return np.frombuffer(data, dtype="<f4").reshape(h, w, 2).astype(np.float64)


# ---------------------------------------------------------------- pfm depth

def write_pfm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth must be HxW")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{depth.shape[1]} {depth.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale: little-endian
        fh.write(depth[::-1].astype("<f4").tobytes())


def _pfm_token(fh) -> bytes:
    tok = b""
    while True:
        c = fh.read(1)
        if not c:
            raise FormatError("truncated pfm header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c
        if len(tok) > 32:
            raise FormatError("oversized pfm header token")


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = _pfm_token(fh)
        if kind == b"PF":
            raise FormatError("color pfm is not supported, expected grayscale 'Pf'")
        if kind != b"Pf":
            raise FormatError(f"bad pfm magic {kind!r}")
        try:
            w = int(_pfm_token(fh))
            h = int(_pfm_token(fh))
            scale = float(_pfm_token(fh))
        except ValueError as exc:
            raise FormatError(f"malformed pfm header: {exc}") from exc
        if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
            raise FormatError(f"implausible pfm dimensions {w}x{h}")
        if scale == 0:
            raise FormatError("pfm scale must be non-zero")
        endian = "<" if scale < 0 else ">"
        data = _read_exact(fh, w * h * 4, "pfm payload")
    img = np.frombuffer(data, dtype=f"{endian}f4").reshape(h, w)
    return img[::-1].astype(np.float64)


# ---------------------------------------------------------------- wav audio

def read_wav(path) -> tuple[np.ndarray, int]:
    """Decode PCM16 or float32 wav to ((n, channels) float64, sample rate)."""
    with open(path, "rb") as fh:
        riff = _read_exact(fh, 12, "wav preamble")
        if riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise FormatError("not a RIFF/WAVE file")
        fmt = None
        data = None
        while True:
            head = fh.read(8)
            if len(head) == 0:
                break
            if len(head) != 8:
                raise FormatError("truncated wav chunk header")
            cid, size = head[:4], struct.unpack("<I", head[4:])[0]
            payload = _read_exact(fh, size, f"wav chunk {cid!r}")
            if size % 2:
                fh.read(1)  # chunks are word-aligned
            if cid == b"fmt ":
                fmt = payload
            elif cid == b"data":
                data = payload
        if fmt is None or data is None:
            raise FormatError("wav missing fmt or data chunk")
        if len(fmt) < 16:
            raise FormatError("wav fmt chunk too small")
        code, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
        if channels < 1 or channels > 8:
            raise FormatError(f"unsupported wav channel count {channels}")
        if rate <= 0:
            raise FormatError("wav sample rate must be positive")
        if code == 1 and bits == 16:
            raw = np.frombuffer(data[: len(data) // (2 * channels) * 2 * channels],
                                dtype="<i2")
            samples = raw.astype(np.float64) / 32768.0
        elif code == 3 and bits == 32:
            raw = np.frombuffer(data[: len(data) // (4 * channels) * 4 * channels],
                                dtype="<f4")
            samples = raw.astype(np.float64)
        else:
            raise FormatError(
                f"unsupported wav encoding (format {code}, {bits} bits); "
                "only 16-bit PCM and 32-bit float are handled")
    return samples.reshape(-1, channels), int(rate)


def write_wav(path, samples: np.ndarray, sample_rate: int,
              encoding: str = "float32") -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2:
        raise ValueError("samples must be (n,) or (n, channels)")
    channels = samples.shape[1]
    if encoding == "pcm16":
        code, bits = 1, 16
        payload = np.clip(np.round(samples * 32768.0), -32768, 32767) \
            .astype("<i2").tobytes()
    elif encoding == "float32":
        code, bits = 3, 32
        payload = samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown wav encoding {encoding!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", code, channels, sample_rate,
                      sample_rate * block, block, bits)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload))
                 + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(payload)) + payload)
        if len(payload) % 2:
            fh.write(b"\x00")


# ------------------------------------------------------------ keypoint text

def read_keypoints(path) -> dict[tuple[str, int], tuple[float, float]]:
    """Tracked 2D source observations.

    Lines are "camera_id frame_index x y confidence"; comments start with #.
    Entries below confidence 0.5 are dropped; a duplicated (camera, frame)
    key keeps the last entry and warns.
    """
    out: dict[tuple[str, int], tuple[float, float]] = {}
    for lineno, line in enumerate(_read_text_lines(path), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"keypoints line {lineno}: expected 5 fields")
        cam = parts[0]
        try:
            frame = int(parts[1])
            x, y, conf = (float(p) for p in parts[2:])
        except ValueError as exc:
            raise FormatError(f"keypoints line {lineno}: {exc}") from exc
        if not np.isfinite([x, y, conf]).all():
            raise FormatError(f"keypoints line {lineno}: non-finite value")
        if conf < 0.5:
            continue
        key = (cam, frame)
        if key in out:
            warnings.warn(f"duplicate keypoint for {key}, keeping the last")
        out[key] = (x, y)
    return out


def write_keypoints(path, points: dict[tuple[str, int], tuple[float, float]],
                    confidence: float = 1.0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# camera_id frame_index x y confidence\n")
        for (cam, frame), (x, y) in sorted(points.items()):
            fh.write(f"{cam} {int(frame)} {float(x)!r} {float(y)!r} "
                     f"{float(confidence)!r}\n")


# -------------------------------------------------- sparse reconstruction

@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray  # PINHOLE: fx fy cx cy; SIMPLE_PINHOLE: f cx cy


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray   # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray          # (P, 2) observations
    point3d_ids: np.ndarray  # (P,), -1 where untracked


@dataclass
class ColmapPoint:
    point_id: int
    xyz: np.ndarray
    rgb: np.ndarray  # uint8
    error: float
    track: list[tuple[int, int]]  # (image_id, index into that image's xys)


def qvec_to_rotation(qvec: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(qvec, dtype=np.float64) / np.linalg.norm(qvec)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_qvec(rot: np.ndarray) -> np.ndarray:
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _data_lines(path):
    for lineno, line in enumerate(_read_text_lines(path), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def read_colmap_cameras(path) -> dict[int, ColmapCamera]:
    param_counts = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}
    out: dict[int, ColmapCamera] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 4:
            raise FormatError(f"cameras line {lineno}: too few fields")
        model = parts[1]
        if model not in param_counts:
            raise FormatError(f"cameras line {lineno}: unsupported model {model!r}; "
                              "only PINHOLE and SIMPLE_PINHOLE are handled")
        try:
            cam_id = int(parts[0])
            width, height = int(parts[2]), int(parts[3])
            params = np.array([float(p) for p in parts[4:]])
        except ValueError as exc:
            raise FormatError(f"cameras line {lineno}: {exc}") from exc
        if params.size != param_counts[model]:
            raise FormatError(f"cameras line {lineno}: {model} wants "
                              f"{param_counts[model]} params, got {params.size}")
        if width <= 0 or height <= 0 or width > MAX_DIM or height > MAX_DIM:
            raise FormatError(f"cameras line {lineno}: bad dimensions")
        out[cam_id] = ColmapCamera(cam_id, model, width, height, params)
    return out


def write_colmap_cameras(path, cameras: dict[int, ColmapCamera]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam in sorted(cameras.values(), key=lambda c: c.camera_id):
            params = " ".join(repr(float(p)) for p in cam.params)
            fh.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")


def read_colmap_images(path) -> dict[int, ColmapImage]:
    out: dict[int, ColmapImage] = {}
    pending = None
    for lineno, line in enumerate(_read_text_lines(path), 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line and pending is None:
            continue  # blank observation lines are kept: no-observation images
        if pending is None:
            parts = line.split()
            if len(parts) < 10:
                raise FormatError(f"images line {lineno}: too few fields")
            try:
                image_id = int(parts[0])
                qvec = np.array([float(p) for p in parts[1:5]])
                tvec = np.array([float(p) for p in parts[5:8]])
                camera_id = int(parts[8])
            except ValueError as exc:
                raise FormatError(f"images line {lineno}: {exc}") from exc
            name = " ".join(parts[9:])
            pending = (image_id, qvec, tvec, camera_id, name)
        else:
            parts = line.split()
            if len(parts) % 3 != 0:
                raise FormatError(f"images line {lineno}: observations not triples")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"images line {lineno}: {exc}") from exc
            arr = np.array(vals).reshape(-1, 3)
            image_id, qvec, tvec, camera_id, name = pending
            out[image_id] = ColmapImage(
                image_id, qvec, tvec, camera_id, name,
                xys=arr[:, :2].copy(), point3d_ids=arr[:, 2].astype(np.int64))
            pending = None
    if pending is not None:
        raise FormatError("images file ends mid-record (missing observation line)")
    return out


def write_colmap_images(path, images: dict[int, ColmapImage]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        fh.write("#   POINTS2D[] as (X Y POINT3D_ID)\n")
        for img in sorted(images.values(), key=lambda i: i.image_id):
            q = " ".join(repr(float(v)) for v in img.qvec)
            t = " ".join(repr(float(v)) for v in img.tvec)
            fh.write(f"{img.image_id} {q} {t} {img.camera_id} {img.name}\n")
            obs = " ".join(
                f"{float(img.xys[i, 0])!r} {float(img.xys[i, 1])!r} "
                f"{int(img.point3d_ids[i])}"
                for i in range(img.xys.shape[0]))
            fh.write(obs + "\n")


def read_colmap_points(path) -> dict[int, ColmapPoint]:
    out: dict[int, ColmapPoint] = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise FormatError(f"points line {lineno}: bad field count")
        try:
            pid = int(parts[0])
            xyz = np.array([float(p) for p in parts[1:4]])
            rgb = np.array([int(p) for p in parts[4:7]], dtype=np.int64)
            err = float(parts[7])
            track_vals = [int(p) for p in parts[8:]]
        except ValueError as exc:
            raise FormatError(f"points line {lineno}: {exc}") from exc
        if rgb.min() < 0 or rgb.max() > 255:
            raise FormatError(f"points line {lineno}: rgb out of byte range")
        track = list(zip(track_vals[0::2], track_vals[1::2]))
        out[pid] = ColmapPoint(pid, xyz, rgb.astype(np.uint8), err, track)
    return out


def write_colmap_points(path, points: dict[int, ColmapPoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)\n")
        for pt in sorted(points.values(), key=lambda p: p.point_id):
            xyz = " ".join(repr(float(v)) for v in pt.xyz)
            rgb = " ".join(str(int(v)) for v in pt.rgb)
            track = " ".join(f"{i} {j}" for i, j in pt.track)
            fh.write(f"{pt.point_id} {xyz} {rgb} {float(pt.error)!r} {track}"
                     .rstrip() + "\n")


def colmap_to_camera_models(cameras: dict[int, ColmapCamera],
                            images: dict[int, ColmapImage]) -> list[CameraModel]:
    """Build render cameras; the image NAME column is the camera id."""
    out = []
    for img in sorted(images.values(), key=lambda i: i.image_id):
        if img.camera_id not in cameras:
            raise FormatError(f"image {img.name} references unknown camera "
                              f"{img.camera_id}")
        cam = cameras[img.camera_id]
        if cam.model == "PINHOLE":
            fx, fy, cx, cy = cam.params
        else:  # SIMPLE_PINHOLE
            fx = fy = cam.params[0]
            cx, cy = cam.params[1], cam.params[2]
        for i in range(img.xys.shape[0]):
            x, y = img.xys[i]
            if not (0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1):
                raise FormatError(f"image {img.name}: observation {i} at "
                                  f"({x}, {y}) lies outside {cam.width}x{cam.height}")
        out.append(CameraModel(
            cam_id=img.name, width=cam.width, height=cam.height,
            fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
            rotation=qvec_to_rotation(img.qvec), translation=img.tvec.astype(np.float64),
            color_grid=BilateralGrid.identity(cam_id=img.name)))
    return out


# ---------------------------------------------------------------- images

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise FormatError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


# ------------------------------------------------------------- checkpoints

@dataclass
class CameraCalibration:
    cam_id: str
    delta_gamma: float
    grid: BilateralGrid


@dataclass
class Checkpoint:
    splats: SplatSet
    calibrations: dict[str, CameraCalibration]


_SPLAT_FIELDS = ("position", "rotation", "log_scale", "sh", "opacity_logit",
                 "velocity", "temporal_center", "temporal_extent", "is_static")


def save_checkpoint(path, splats: SplatSet,
                    calibrations: dict[str, CameraCalibration] | None = None) -> None:
    """Binary layout (all little-endian):

    magic "IVV4" | version u32 | count u64 | sh_degree u32 | num_cameras u32
    then the splat arrays as float32 in declaration order (is_static as 0/1),
    then per camera: id length u32, id utf-8 bytes, delta_gamma f32,
    grid dims 3x u32, grid cells f32.
    """
    splats.validate()
    calibrations = calibrations or {}
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQII", CHECKPOINT_VERSION, splats.count,
                             splats.sh_degree, len(calibrations)))
        for name in _SPLAT_FIELDS:
            fh.write(getattr(splats, name).astype("<f4").tobytes())
        for cam_id in sorted(calibrations):
            cal = calibrations[cam_id]
            ident = cam_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)) + ident)
            fh.write(struct.pack("<f", cal.delta_gamma))
            gw, gh, gd = cal.grid.dims
            fh.write(struct.pack("<III", gw, gh, gd))
            fh.write(cal.grid.cells.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, count, sh_degree, num_cams = struct.unpack(
            "<IQII", _read_exact(fh, 20, "checkpoint header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if count > 100_000_000 or sh_degree > 3 or num_cams > 100_000:
            raise FormatError("implausible checkpoint header")
        n = int(count)
        basis = (sh_degree + 1) ** 2
        shapes = {
            "position": (n, 3), "rotation": (n, 4), "log_scale": (n, 3),
            "sh": (n, basis, 3), "opacity_logit": (n,), "velocity": (n, 3),
            "temporal_center": (n,), "temporal_extent": (n,), "is_static": (n,),
        }
        arrays = {}
        for name in _SPLAT_FIELDS:
            shape = shapes[name]
            nbytes = int(np.prod(shape)) * 4
            raw = np.frombuffer(_read_exact(fh, nbytes, f"checkpoint field {name}"),
                                dtype="<f4").reshape(shape)
            arrays[name] = raw.astype(bool) if name == "is_static" \
                else raw.astype(np.float64)
        calibrations = {}
        for _ in range(num_cams):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, "camera id length"))
            if id_len > 4096:
                raise FormatError("implausible camera id length")
            try:
                cam_id = _read_exact(fh, id_len, "camera id").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"camera id is not utf-8: {exc}") from exc
            (dg,) = struct.unpack("<f", _read_exact(fh, 4, "camera offset"))
            gw, gh, gd = struct.unpack("<III", _read_exact(fh, 12, "grid dims"))
            if not (0 < gw <= 256 and 0 < gh <= 256 and 0 < gd <= 256):
                raise FormatError("implausible grid dimensions")
            cells = np.frombuffer(
                _read_exact(fh, gw * gh * gd * 12 * 4, "grid cells"),
                dtype="<f4").reshape(gw, gh, gd, 3, 4).astype(np.float64)
            calibrations[cam_id] = CameraCalibration(
                cam_id, float(dg), BilateralGrid(cells=cells, cam_id=cam_id))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    splats = SplatSet(**arrays)
    try:
        splats.validate()
    except ValueError as exc:
        raise FormatError(f"checkpoint payload invalid: {exc}") from exc
    return Checkpoint(splats=splats, calibrations=calibrations)
