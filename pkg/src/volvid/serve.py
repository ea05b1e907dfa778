"""Socket render service: live 6-DoF poses in, frames and audio blocks out.

One listening port speaks both transports: a connection opening with an
HTTP GET is upgraded to a WebSocket (binary frames carry the same framed
messages); anything else is treated as a raw stream of framed messages.

Sessions are independent. Each runs a reader (parses pose/control), a
render worker (latest-wins pose, at most one in-flight render), and, when
the scene has audio, an audio worker pacing hop-sized binaural blocks
against the session's playback clock. Sessions start paused at t=0 and
immediately deliver one frame from a default pose so a client sees the
scene without sending anything.

While playing, frame times above 100 ms halve the render resolution and
times below 40 ms step it back up; paused interaction always renders at
the requested size.
"""

from __future__ import annotations

import base64
import hashlib
import io
import socket
import struct
import threading
import time

import numpy as np
from PIL import Image

from . import protocol
from .fileio import qvec_to_rotation, rotation_to_qvec
from .manifest import SceneManifest
from .raster import CameraModel, RasterOptions, rasterize
from .scene import SplatSet
from .soundfield import (ListenerPose, distance_gain, select_hrir,
                         source_azimuth, triangulate_source)

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_JPEG_QUALITY = 90
_MIN_SCALE = 0.125
_AUDIO_LOOKAHEAD = 0.25  # seconds of audio kept synthesized ahead of the clock
_MAX_POSE_HISTORY = 600


def _yaw_from_quaternion(q: np.ndarray) -> float:
    """Heading of the camera's forward axis projected to the ground plane."""
    forward = qvec_to_rotation(q) @ np.array([0.0, 0.0, 1.0])
    return float(np.arctan2(-forward[0], forward[1]))


def pose_to_camera(pose: dict, scale: float) -> CameraModel:
    width = max(int(round(pose["width"] * scale)), 16)
    height = max(int(round(pose["height"] * scale)), 16)
    fy = (height / 2.0) / np.tan(pose["fov_y"] / 2.0)
    q = np.array(pose["orientation"], dtype=np.float64)
    cam_to_world = qvec_to_rotation(q)
    rotation = cam_to_world.T
    position = np.array(pose["position"], dtype=np.float64)
    return CameraModel(cam_id="live", width=width, height=height,
                       fx=fy, fy=fy, cx=(width - 1) / 2.0,
                       cy=(height - 1) / 2.0, rotation=rotation,
                       translation=-rotation @ position)


def default_pose(camera: CameraModel) -> dict:
    """A pose message equivalent to one of the dataset's cameras."""
    q = rotation_to_qvec(camera.rotation.T)
    fov_y = 2.0 * np.arctan((camera.height / 2.0) / camera.fy)
    return {"position": [float(v) for v in camera.center()],
            "orientation": [float(v) for v in q],
            "t": 0.0, "fov_y": float(fov_y),
            "width": camera.width, "height": camera.height}


def encode_jpeg(color: np.ndarray) -> bytes:
    arr = (np.clip(color, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, "JPEG", quality=_JPEG_QUALITY)
    return buf.getvalue()


class PlaybackClock:
    """Normalized playback time; wraps around at the end of the clip."""

    def __init__(self, duration_seconds: float) -> None:
        self.duration = max(duration_seconds, 1.0e-9)
        self._lock = threading.Lock()
        self._paused = True
        self._t = 0.0
        self._anchor = time.monotonic()

    def now(self) -> float:
        with self._lock:
            if self._paused:
                return self._t
            elapsed = (time.monotonic() - self._anchor) / self.duration
            return (self._t + elapsed) % 1.0

    @property
    def paused(self) -> bool:
        with self._lock:
            return self._paused

    def play(self) -> None:
        with self._lock:
            if self._paused:
                self._paused = False
                self._anchor = time.monotonic()

    def pause(self) -> None:
        with self._lock:
            if not self._paused:
                elapsed = (time.monotonic() - self._anchor) / self.duration
                self._t = (self._t + elapsed) % 1.0
                self._paused = True

    def seek(self, t: float) -> None:
        with self._lock:
            self._t = min(max(t, 0.0), 1.0)
            self._anchor = time.monotonic()


class PoseSlot:
    """Single-slot mailbox: writers overwrite, the render worker drains."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._pose: dict | None = None
        self._dirty = False

    def put(self, pose: dict) -> None:
        with self._cond:
            self._pose = pose
            self._dirty = True
            self._cond.notify_all()

    def poke(self) -> None:
        """Mark the current pose dirty again (seek/pause re-render)."""
        with self._cond:
            if self._pose is not None:
                self._dirty = True
            self._cond.notify_all()

    def latest(self) -> dict | None:
        with self._cond:
            self._dirty = False
            return self._pose

    def wait_dirty(self, timeout: float) -> bool:
        with self._cond:
            if self._dirty:
                return True
            self._cond.wait(timeout)
            return self._dirty


# -------------------------------------------------------------- transports

class RawTransport:
    def __init__(self, conn: socket.socket) -> None:
        self._conn = conn

    def recv_chunk(self) -> bytes | None:
        data = self._conn.recv(65536)
        return data or None

    def send(self, data: bytes) -> None:
        self._conn.sendall(data)

    def close(self) -> None:
        try:
            self._conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._conn.close()


class WebSocketTransport:
    """Minimal RFC 6455 server endpoint carrying our framed messages."""

    def __init__(self, conn: socket.socket, first_bytes: bytes) -> None:
        self._conn = conn
        self._buf = bytearray(first_bytes)
        self._send_lock = threading.Lock()
        self._handshake()

    def _read_more(self) -> bool:
        data = self._conn.recv(65536)
        if not data:
            return False
        self._buf.extend(data)
        return True

    def _take(self, n: int) -> bytes | None:
        while len(self._buf) < n:
            if not self._read_more():
                return None
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def _handshake(self) -> None:
        while b"\r\n\r\n" not in self._buf:
            if not self._read_more():
                raise ConnectionError("socket closed during websocket handshake")
        raw, _, rest = bytes(self._buf).partition(b"\r\n\r\n")
        self._buf = bytearray(rest)
        key = None
        for line in raw.split(b"\r\n")[1:]:
            name, _, value = line.partition(b":")
            if name.strip().lower() == b"sec-websocket-key":
                key = value.strip().decode("ascii")
        if key is None:
            raise ConnectionError("websocket handshake missing its key header")
        accept = base64.b64encode(hashlib.sha1(
            (key + _WS_GUID).encode("ascii")).digest()).decode("ascii")
        self._conn.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept.encode("ascii") + b"\r\n\r\n")

    def recv_chunk(self) -> bytes | None:
        """Payload of the next data frame; handles ping/close inline."""
        while True:
            head = self._take(2)
            if head is None:
                return None
            fin_op, mask_len = head
            opcode = fin_op & 0x0F
            masked = bool(mask_len & 0x80)
            length = mask_len & 0x7F
            if length == 126:
                ext = self._take(2)
                if ext is None:
                    return None
                (length,) = struct.unpack(">H", ext)
            elif length == 127:
                ext = self._take(8)
                if ext is None:
                    return None
                (length,) = struct.unpack(">Q", ext)
            if length > protocol.MAX_PAYLOAD + 1024:
                raise ConnectionError("websocket frame exceeds the payload cap")
            mask = self._take(4) if masked else b"\x00" * 4
            if mask is None:
                return None
            payload = self._take(length)
            if payload is None:
                return None
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode in (0x00, 0x01, 0x02):
                return payload
            if opcode == 0x08:
                with self._send_lock:
                    try:
                        self._conn.sendall(b"\x88\x00")
                    except OSError:
                        pass
                return None
            if opcode == 0x09:
                self._send_control(0x0A, payload)
            # pong (0x0A) and anything unknown: ignore

    def _send_control(self, opcode: int, payload: bytes) -> None:
        with self._send_lock:
            self._conn.sendall(bytes([0x80 | opcode, len(payload)]) + payload)

    def send(self, data: bytes) -> None:
        n = len(data)
        if n < 126:
            head = bytes([0x82, n])
        elif n < 1 << 16:
            head = b"\x82\x7e" + struct.pack(">H", n)
        else:
            head = b"\x82\x7f" + struct.pack(">Q", n)
        with self._send_lock:
            self._conn.sendall(head + data)

    def close(self) -> None:
        try:
            self._conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._conn.close()


# ------------------------------------------------------------------ session

class _AudioPipeline:
    """Per-scene immutable audio state shared by all sessions."""

    def __init__(self, manifest: SceneManifest, cameras: list[CameraModel]):
        clip = manifest.load_audio()
        self.mono = clip.samples if clip.samples.ndim == 1 \
            else clip.samples[:, 0]
        self.rate = clip.sample_rate
        self.source = triangulate_source(
            manifest.load_keypoints(), cameras, manifest.num_frames,
            manifest.mic_camera)
        self.hrirs = manifest.load_hrirs()
        mic = next(c for c in cameras if c.cam_id == manifest.mic_camera)
        self.mic_xy = mic.center()[:2]
        self.ir_len = self.hrirs.left.shape[1]


class Session(threading.Thread):
    _ids = 0

    def __init__(self, service: "RenderService", transport) -> None:
        Session._ids += 1
        super().__init__(name=f"session-{Session._ids}", daemon=True)
        self.service = service
        self.transport = transport
        self.clock = PlaybackClock(service.clip_seconds)
        self.slot = PoseSlot()
        self.alive = threading.Event()
        self.alive.set()
        self._send_lock = threading.Lock()
        self._frame_seq = 0
        self._audio_seq = 0
        self._scale = 1.0
        self._audio_reset = threading.Event()
        self._pose_history: list[tuple[float, float, float, float]] = []
        self._history_lock = threading.Lock()

    # --------------------------------------------------------------- sending

    def _send(self, data: bytes) -> bool:
        try:
            with self._send_lock:
                self.transport.send(data)
            return True
        except OSError:
            self.alive.clear()
            return False

    def _send_error(self, code: str, message: str) -> None:
        self._send(protocol.encode_error(code, message))

    # ---------------------------------------------------------------- reader

    def run(self) -> None:
        workers = [threading.Thread(target=self._render_loop, daemon=True)]
        if self.service.audio is not None:
            workers.append(threading.Thread(target=self._audio_loop,
                                            daemon=True))
        pose0 = default_pose(self.service.default_camera)
        self._record_pose(pose0)
        self.slot.put(pose0)
        for w in workers:
            w.start()
        reader = protocol.MessageReader()
        try:
            while self.alive.is_set():
                chunk = self.transport.recv_chunk()
                if chunk is None:
                    break
                for msg_type, payload in reader.feed(chunk):
                    self._dispatch(msg_type, payload)
        except protocol.ProtocolError as exc:
            self._send_error("bad-message", str(exc))
        except (ConnectionError, OSError):
            pass
        finally:
            self.alive.clear()
            self.slot.poke()
            for w in workers:
                w.join(timeout=5.0)
            self.transport.close()
            self.service.forget(self)

    def _dispatch(self, msg_type: int, payload: bytes) -> None:
        if msg_type == protocol.MSG_POSE:
            pose = protocol.decode_pose(payload)
            if self.clock.paused:
                self.clock.seek(pose["t"])
            self.slot.put(pose)
            self._record_pose(pose)
        elif msg_type == protocol.MSG_CONTROL:
            control = protocol.decode_control(payload)
            action = control["action"]
            if action == "play":
                self.clock.play()
                self.slot.poke()
            elif action == "pause":
                self.clock.pause()
            else:
                self.clock.seek(control["t"])
                self._audio_reset.set()
                self.slot.poke()
        else:
            raise protocol.ProtocolError(
                f"client may not send message type 0x{msg_type:02x}")

    def _record_pose(self, pose: dict) -> None:
        if not pose:
            return
        yaw = _yaw_from_quaternion(np.array(pose["orientation"]))
        entry = (self.clock.now(), pose["position"][0],
                 pose["position"][1], yaw)
        with self._history_lock:
            self._pose_history.append(entry)
            if len(self._pose_history) > _MAX_POSE_HISTORY:
                del self._pose_history[:-_MAX_POSE_HISTORY]

    def _listener_at(self, t: float) -> tuple[float, float, float]:
        with self._history_lock:
            hist = list(self._pose_history)
        if not hist:
            return 0.0, 0.0, 0.0
        if t <= hist[0][0]:
            return hist[0][1:]
        for a, b in zip(hist, hist[1:]):
            if a[0] <= t <= b[0]:
                span = b[0] - a[0]
                w = 0.0 if span <= 0 else (t - a[0]) / span
                return (a[1] + w * (b[1] - a[1]), a[2] + w * (b[2] - a[2]),
                        a[3] + w * (b[3] - a[3]))
        return hist[-1][1:]

    # ---------------------------------------------------------------- video

    def _render_loop(self) -> None:
        while self.alive.is_set():
            playing = not self.clock.paused
            if not playing and not self.slot.wait_dirty(0.25):
                continue
            if not self.alive.is_set():
                break
            pose = self.slot.latest()
            if pose is None:
                continue
            t = self.clock.now()
            scale = self._scale if playing else 1.0
            started = time.monotonic()
            try:
                camera = pose_to_camera(pose, scale)
                out = rasterize(camera, self.service.splats, t,
                                self.service.opts)
                jpeg = encode_jpeg(out.color)
            except Exception as exc:  # render must not kill the session
                self._send_error("render-failed", str(exc))
                continue
            elapsed_ms = (time.monotonic() - started) * 1000.0
            if playing:
                if elapsed_ms > 100.0:
                    self._scale = max(self._scale / 2.0, _MIN_SCALE)
                elif elapsed_ms < 40.0:
                    self._scale = min(self._scale * 2.0, 1.0)
            self._frame_seq += 1
            if not self._send(protocol.encode_frame(
                    self._frame_seq, t, pose, camera.width, camera.height,
                    jpeg, elapsed_ms)):
                break
            if playing:
                time.sleep(max(0.0, 1.0 / 60.0 - (time.monotonic() - started)))

    # ---------------------------------------------------------------- audio

    def _audio_loop(self) -> None:
        audio = self.service.audio
        hop = protocol.AUDIO_BLOCK
        tail = np.zeros((audio.ir_len - 1, 2))
        next_block = 0
        prev_az = 0.0
        was_paused = True
        total_blocks = max(len(audio.mono) // hop, 1)
        while self.alive.is_set():
            if self.clock.paused:
                was_paused = True
                time.sleep(0.02)
                continue
            t_now = self.clock.now()
            cur = int(t_now * self.clock.duration * audio.rate) // hop
            lookahead_blocks = int(_AUDIO_LOOKAHEAD * audio.rate) // hop + 1
            stale = abs(next_block - cur) > 4 * lookahead_blocks
            if was_paused or self._audio_reset.is_set() or stale:
                self._audio_reset.clear()
                next_block = cur
                tail[:] = 0.0
                was_paused = False
            if next_block > cur + lookahead_blocks:
                time.sleep(hop / audio.rate / 2.0)
                continue
            block = next_block % total_blocks
            n0 = block * hop
            mono = audio.mono[n0:n0 + hop]
            if mono.shape[0] < hop:
                mono = np.pad(mono, (0, hop - mono.shape[0]))
            t_center = ((n0 + hop / 2.0) / audio.rate) / self.clock.duration
            t_center = min(t_center, 1.0)
            lx, ly, yaw = self._listener_at(self.clock.now())
            listener = ListenerPose(t=t_center, position=np.array(
                [lx - audio.mic_xy[0], ly - audio.mic_xy[1]]), yaw=yaw)
            source_xy = audio.source.at(t_center)[:2]
            prev_az = source_azimuth(source_xy, listener, previous=prev_az)
            gain = distance_gain(source_xy, listener.position)
            left, right = select_hrir(audio.hrirs, prev_az)
            out = np.stack([np.convolve(mono, gain * left),
                            np.convolve(mono, gain * right)], axis=1)
            out[:tail.shape[0]] += tail
            tail = out[hop:hop + audio.ir_len - 1].copy()
            samples = np.clip(out[:hop], -1.0, 1.0)
            self._audio_seq += 1
            t0 = (n0 / audio.rate) / self.clock.duration
            if not self._send(protocol.encode_audio(
                    self._audio_seq, min(t0, 1.0), audio.rate, samples)):
                break
            next_block += 1


# ------------------------------------------------------------------ service

class RenderService:
    """Owns the listening socket and the immutable scene."""

    def __init__(self, manifest: SceneManifest, splats: SplatSet,
                 cameras: list[CameraModel], host: str = "127.0.0.1",
                 port: int = 0, threads: int = 1) -> None:
        self.manifest = manifest
        self.splats = splats
        self.opts = RasterOptions(background=manifest.background.copy(),
                                  num_frames=manifest.num_frames,
                                  threads=threads)
        self.default_camera = cameras[0]
        self.clip_seconds = max(manifest.num_frames - 1, 1) / manifest.fps
        self.audio = _AudioPipeline(manifest, cameras) \
            if manifest.audio_file is not None else None
        self._sessions: set[Session] = set()
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.port = self._sock.getsockname()[1]
        self._closing = False

    def run_forever(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            threading.Thread(target=self._start_session, args=(conn,),
                             daemon=True).start()

    def _start_session(self, conn: socket.socket) -> None:
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            # websocket clients open with an HTTP GET right away; a silent
            # opener is a raw client waiting for its first frame
            conn.settimeout(0.5)
            try:
                head = conn.recv(4, socket.MSG_PEEK)
            except TimeoutError:
                head = b""
            conn.settimeout(None)
            if head.startswith(b"GET"):
                transport = WebSocketTransport(conn, b"")
            else:
                transport = RawTransport(conn)
        except (ConnectionError, OSError):
            conn.close()
            return
        session = Session(self, transport)
        with self._lock:
            self._sessions.add(session)
        session.start()

    def forget(self, session: Session) -> None:
        with self._lock:
            self._sessions.discard(session)

    def close(self) -> None:
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.alive.clear()
            s.transport.close()
