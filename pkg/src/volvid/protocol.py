"""Wire format for the render service.

Every message is [type: u8][length: u32 little-endian][payload], byte-exact
on both raw TCP streams and inside WebSocket binary frames. Types:

  0x01 pose     client -> server, JSON
  0x02 control  client -> server, JSON ({"action": "play"|"pause"|"seek", ...})
  0x81 frame    server -> client, [u32 header_len][header JSON][JPEG bytes]
  0x82 audio    server -> client, [u32 header_len][header JSON][f32le samples]
  0xFF error    server -> client, JSON ({"code", "message"})

Frame headers carry the exact pose used for the render; audio headers carry
the playback time their first sample covers. JSON payloads are UTF-8.
"""

from __future__ import annotations

import json
from collections import deque
import struct

import numpy as np

MSG_POSE = 0x01
MSG_CONTROL = 0x02
MSG_FRAME = 0x81
MSG_AUDIO = 0x82
MSG_ERROR = 0xFF

MAX_PAYLOAD = 16 << 20
MAX_FRAME_DIM = (1280, 720)
AUDIO_BLOCK = 256


class ProtocolError(ValueError):
    """Framing or payload violates the wire format."""


def pack_message(msg_type: int, payload: bytes) -> bytes:
    if not 0 <= msg_type <= 0xFF:
        raise ProtocolError(f"message type {msg_type} out of range")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the cap")
    return struct.pack("<BI", msg_type, len(payload)) + payload


class MessageReader:
    """Incremental splitter for a byte stream of framed messages."""

    def __init__(self) -> None:
        self._buf = bytearray()
        self._queue: deque[tuple[int, bytes]] = deque()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        """Absorb bytes; returns (and also queues) newly completed messages."""
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 5:
            msg_type, length = struct.unpack_from("<BI", self._buf)
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"declared payload {length} exceeds the cap")
            if len(self._buf) < 5 + length:
                break
            payload = bytes(self._buf[5:5 + length])
            del self._buf[:5 + length]
            out.append((msg_type, payload))
        self._queue.extend(out)
        return out

    def pop(self) -> tuple[int, bytes] | None:
        return self._queue.popleft() if self._queue else None

    @property
    def pending(self) -> int:
        return len(self._buf)


def _json_payload(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def _parse_json(payload: bytes, what: str) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"{what} payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"{what} payload must be a JSON object")
    return obj


# ----------------------------------------------------------------- pose

def encode_pose(position, orientation, t: float, fov_y: float,
                width: int, height: int) -> bytes:
    obj = {"position": [float(v) for v in position],
           "orientation": [float(v) for v in orientation],
           "t": float(t), "fov_y": float(fov_y),
           "width": int(width), "height": int(height)}
    return pack_message(MSG_POSE, _json_payload(obj))


def decode_pose(payload: bytes) -> dict:
    """Validate and normalize a pose payload.

    The quaternion must be unit within 1e-3 and is renormalized; requested
    dimensions are clamped to the frame cap.
    """
    obj = _parse_json(payload, "pose")
    for key, n in (("position", 3), ("orientation", 4)):
        val = obj.get(key)
        if (not isinstance(val, list) or len(val) != n
                or not all(isinstance(v, (int, float)) for v in val)):
            raise ProtocolError(f"pose {key} must be {n} numbers")
    for key in ("t", "fov_y"):
        if not isinstance(obj.get(key), (int, float)):
            raise ProtocolError(f"pose {key} must be a number")
    for key in ("width", "height"):
        if not isinstance(obj.get(key), int) or obj[key] < 1:
            raise ProtocolError(f"pose {key} must be a positive integer")
    q = np.array(obj["orientation"], dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if not np.isfinite(norm) or abs(norm - 1.0) > 1.0e-3:
        raise ProtocolError(f"orientation norm {norm:.6f} is not unit within 1e-3")
    if not all(np.isfinite(v) for v in obj["position"]):
        raise ProtocolError("pose position must be finite")
    if not 0.0 < obj["fov_y"] < np.pi:
        raise ProtocolError(f"fov_y {obj['fov_y']} outside (0, pi)")
    return {
        "position": [float(v) for v in obj["position"]],
        "orientation": [float(v) for v in q / norm],
        "t": float(obj["t"]),
        "fov_y": float(obj["fov_y"]),
        "width": min(int(obj["width"]), MAX_FRAME_DIM[0]),
        "height": min(int(obj["height"]), MAX_FRAME_DIM[1]),
    }


# ----------------------------------------------------------------- control

def encode_control(action: str, **fields) -> bytes:
    return pack_message(MSG_CONTROL, _json_payload({"action": action, **fields}))


def decode_control(payload: bytes) -> dict:
    obj = _parse_json(payload, "control")
    action = obj.get("action")
    if action not in ("play", "pause", "seek"):
        raise ProtocolError(f"unknown control action {action!r}")
    if action == "seek":
        t = obj.get("t")
        if not isinstance(t, (int, float)) or not 0.0 <= t <= 1.0:
            raise ProtocolError("seek needs t in [0, 1]")
        obj["t"] = float(t)
    return obj


# ------------------------------------------------------------ frame / audio

def _pack_with_header(msg_type: int, header: dict, blob: bytes) -> bytes:
    head = _json_payload(header)
    return pack_message(msg_type,
                        struct.pack("<I", len(head)) + head + blob)


def _split_header(payload: bytes, what: str) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise ProtocolError(f"{what} payload shorter than its header prefix")
    (head_len,) = struct.unpack_from("<I", payload)
    if 4 + head_len > len(payload):
        raise ProtocolError(f"{what} header length {head_len} overruns payload")
    header = _parse_json(payload[4:4 + head_len], what)
    return header, payload[4 + head_len:]


def encode_frame(seq: int, t: float, pose: dict, width: int, height: int,
                 jpeg: bytes, render_ms: float) -> bytes:
    header = {"seq": int(seq), "t": float(t), "pose": pose,
              "width": int(width), "height": int(height),
              "format": "jpeg", "render_ms": float(render_ms)}
    return _pack_with_header(MSG_FRAME, header, jpeg)


def decode_frame(payload: bytes) -> tuple[dict, bytes]:
    return _split_header(payload, "frame")


def encode_audio(seq: int, t0: float, sample_rate: int,
                 samples: np.ndarray) -> bytes:
    """samples: (n, 2) float; sent as interleaved little-endian float32."""
    arr = np.asarray(samples, dtype="<f4")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ProtocolError("audio samples must be (n, 2)")
    header = {"seq": int(seq), "t0": float(t0),
              "sample_rate": int(sample_rate), "channels": 2,
              "frames": int(arr.shape[0])}
    return _pack_with_header(MSG_AUDIO, header, arr.tobytes())


def decode_audio(payload: bytes) -> tuple[dict, np.ndarray]:
    header, blob = _split_header(payload, "audio")
    frames = header.get("frames")
    channels = header.get("channels")
    if not isinstance(frames, int) or not isinstance(channels, int):
        raise ProtocolError("audio header needs integer frames and channels")
    want = frames * channels * 4
    if len(blob) != want:
        raise ProtocolError(f"audio blob is {len(blob)} bytes, header says {want}")
    samples = np.frombuffer(blob, dtype="<f4").reshape(frames, channels)
    return header, samples.astype(np.float64)


# ----------------------------------------------------------------- error

def encode_error(code: str, message: str) -> bytes:
    return pack_message(MSG_ERROR, _json_payload(
        {"code": code, "message": message}))


def decode_error(payload: bytes) -> dict:
    obj = _parse_json(payload, "error")
    if not isinstance(obj.get("code"), str):
        raise ProtocolError("error payload needs a string code")
    return obj


# ------------------------------------------------------- blocking socket io

def write_message(sock, data: bytes) -> None:
    sock.sendall(data)


def read_message(sock, reader: MessageReader,
                 timeout: float | None = None) -> tuple[int, bytes] | None:
    """Pop one framed message, reading more bytes as needed; None on EOF."""
    if timeout is not None:
        sock.settimeout(timeout)
    while True:
        msg = reader.pop()
        if msg is not None:
            return msg
        chunk = sock.recv(65536)
        if not chunk:
            return None
        reader.feed(chunk)
