/**
 * Wire codec for the render service.
 *
 * Every message is [type: u8][length: u32 little-endian][payload], identical
 * on raw TCP streams and inside WebSocket binary frames. Clients send poses
 * (0x01) and controls (0x02); servers send frames (0x81), audio (0x82) and
 * errors (0xFF). Frame and audio payloads open with their own
 * [u32 header-length][JSON header] prefix followed by the binary blob.
 */

export const MSG_POSE = 0x01;
export const MSG_CONTROL = 0x02;
export const MSG_FRAME = 0x81;
export const MSG_AUDIO = 0x82;
export const MSG_ERROR = 0xff;

/** Hard cap on a single message payload, mirrored from the server. */
export const MAX_PAYLOAD = 16 << 20;

/** Largest frame a client may request, width by height. */
export const MAX_FRAME_WIDTH = 1280;
export const MAX_FRAME_HEIGHT = 720;

/** Stereo frames per audio message. */
export const AUDIO_BLOCK = 256;

const HEADER_BYTES = 5;

/** Samples arrive little-endian; byte-swap only on the rare BE host. */
const HOST_LITTLE_ENDIAN =
  new Uint8Array(new Uint32Array([1]).buffer)[0] === 1;

const textEncoder = new TextEncoder();
const textDecoder = new TextDecoder("utf-8", { fatal: true });

/** Raised when bytes violate the framing or a payload is malformed. */
export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolError";
  }
}

/** One framed message as it travels on the wire. */
export interface WireMessage {
  type: number;
  payload: Uint8Array;
}

/** Camera pose a client asks the server to render from. */
export interface PoseMessage {
  /** World-space camera position. */
  position: [number, number, number];
  /** Camera-to-world rotation as a unit quaternion (w, x, y, z). */
  orientation: [number, number, number, number];
  /** Normalized playback time in [0, 1]; seeks the clock while paused. */
  t: number;
  /** Vertical field of view in radians, in (0, pi). */
  fovY: number;
  /** Requested frame size in pixels. */
  width: number;
  height: number;
}

/** Pose as the server echoes it inside frame headers (wire field names). */
export interface WirePose {
  position: number[];
  orientation: number[];
  t: number;
  fov_y: number;
  width: number;
  height: number;
}

/** Header preceding the JPEG bytes of a frame message. */
export interface FrameHeader {
  seq: number;
  t: number;
  pose: WirePose;
  width: number;
  height: number;
  format: string;
  render_ms: number;
}

/** Header preceding the sample blob of an audio message. */
export interface AudioHeader {
  seq: number;
  t0: number;
  sample_rate: number;
  channels: number;
  frames: number;
}

/** Server-reported failure. */
export interface ErrorMessage {
  code: string;
  message: string;
}

/** Frame a payload with its one-byte type and little-endian length. */
export function packMessage(type: number, payload: Uint8Array): Uint8Array {
  if (!Number.isInteger(type) || type < 0 || type > 0xff) {
    throw new ProtocolError(`message type ${type} out of range`);
  }
  if (payload.length > MAX_PAYLOAD) {
    throw new ProtocolError(`payload of ${payload.length} bytes exceeds the cap`);
  }
  const out = new Uint8Array(HEADER_BYTES + payload.length);
  const view = new DataView(out.buffer);
  view.setUint8(0, type);
  view.setUint32(1, payload.length, true);
  out.set(payload, HEADER_BYTES);
  return out;
}

function packJson(type: number, obj: unknown): Uint8Array {
  return packMessage(type, textEncoder.encode(JSON.stringify(obj)));
}

/** Encode a pose message ready to send. */
export function encodePose(pose: PoseMessage): Uint8Array {
  return packJson(MSG_POSE, {
    position: pose.position,
    orientation: pose.orientation,
    t: pose.t,
    fov_y: pose.fovY,
    width: Math.round(pose.width),
    height: Math.round(pose.height),
  });
}

/** Encode a playback control; `seek` carries its target time in [0, 1]. */
export function encodeControl(
  action: "play" | "pause" | "seek",
  t?: number,
): Uint8Array {
  const obj: Record<string, unknown> = { action };
  if (action === "seek") {
    if (t === undefined || !(t >= 0 && t <= 1)) {
      throw new ProtocolError("seek needs t in [0, 1]");
    }
    obj.t = t;
  }
  return packJson(MSG_CONTROL, obj);
}

/**
 * Incremental splitter for a byte stream of framed messages.
 *
 * Feed arbitrary chunks; completed messages come back in arrival order.
 * Partial messages stay buffered until the rest arrives.
 */
export class MessageParser {
  private buffer = new Uint8Array(0);

  feed(chunk: Uint8Array): WireMessage[] {
    if (this.buffer.length === 0) {
      this.buffer = chunk.slice();
    } else {
      const merged = new Uint8Array(this.buffer.length + chunk.length);
      merged.set(this.buffer, 0);
      merged.set(chunk, this.buffer.length);
      this.buffer = merged;
    }
    const out: WireMessage[] = [];
    let offset = 0;
    while (this.buffer.length - offset >= HEADER_BYTES) {
      const view = new DataView(
        this.buffer.buffer,
        this.buffer.byteOffset + offset,
      );
      const type = view.getUint8(0);
      const length = view.getUint32(1, true);
      if (length > MAX_PAYLOAD) {
        throw new ProtocolError(`declared payload ${length} exceeds the cap`);
      }
      if (this.buffer.length - offset < HEADER_BYTES + length) {
        break;
      }
      const start = offset + HEADER_BYTES;
      out.push({ type, payload: this.buffer.slice(start, start + length) });
      offset = start + length;
    }
    if (offset > 0) {
      this.buffer = this.buffer.slice(offset);
    }
    return out;
  }

  /** Bytes buffered while waiting for the rest of a message. */
  get pending(): number {
    return this.buffer.length;
  }
}

function parseJson(bytes: Uint8Array, what: string): Record<string, unknown> {
  let obj: unknown;
  try {
    obj = JSON.parse(textDecoder.decode(bytes));
  } catch (err) {
    throw new ProtocolError(`${what} payload is not valid JSON: ${err}`);
  }
  if (typeof obj !== "object" || obj === null || Array.isArray(obj)) {
    throw new ProtocolError(`${what} payload must be a JSON object`);
  }
  return obj as Record<string, unknown>;
}

function splitHeader(
  payload: Uint8Array,
  what: string,
): { header: Record<string, unknown>; blob: Uint8Array } {
  if (payload.length < 4) {
    throw new ProtocolError(`${what} payload shorter than its header prefix`);
  }
  const view = new DataView(payload.buffer, payload.byteOffset);
  const headLen = view.getUint32(0, true);
  if (4 + headLen > payload.length) {
    throw new ProtocolError(`${what} header length ${headLen} overruns payload`);
  }
  const header = parseJson(payload.subarray(4, 4 + headLen), what);
  return { header, blob: payload.slice(4 + headLen) };
}

function requireNumber(
  obj: Record<string, unknown>,
  key: string,
  what: string,
): number {
  const value = obj[key];
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new ProtocolError(`${what} header needs a finite number "${key}"`);
  }
  return value;
}

/** Decode a frame payload into its header and JPEG bytes. */
export function decodeFrame(payload: Uint8Array): {
  header: FrameHeader;
  jpeg: Uint8Array;
} {
  const { header, blob } = splitHeader(payload, "frame");
  requireNumber(header, "seq", "frame");
  requireNumber(header, "t", "frame");
  requireNumber(header, "width", "frame");
  requireNumber(header, "height", "frame");
  if (typeof header.pose !== "object" || header.pose === null) {
    throw new ProtocolError("frame header needs the echoed pose");
  }
  return { header: header as unknown as FrameHeader, jpeg: blob };
}

/** Decode an audio payload into its header and interleaved stereo samples. */
export function decodeAudio(payload: Uint8Array): {
  header: AudioHeader;
  samples: Float32Array;
} {
  const { header, blob } = splitHeader(payload, "audio");
  const frames = requireNumber(header, "frames", "audio");
  const channels = requireNumber(header, "channels", "audio");
  requireNumber(header, "seq", "audio");
  requireNumber(header, "t0", "audio");
  requireNumber(header, "sample_rate", "audio");
  const want = frames * channels * 4;
  if (blob.length !== want) {
    throw new ProtocolError(
      `audio blob is ${blob.length} bytes, header says ${want}`,
    );
  }
  // blob is a fresh copy from splitHeader, so its buffer starts aligned.
  let samples: Float32Array;
  if (HOST_LITTLE_ENDIAN) {
    samples = new Float32Array(blob.buffer, 0, frames * channels);
  } else {
    samples = new Float32Array(frames * channels);
    const blobView = new DataView(blob.buffer);
    for (let i = 0; i < samples.length; i += 1) {
      samples[i] = blobView.getFloat32(i * 4, true);
    }
  }
  return { header: header as unknown as AudioHeader, samples };
}

/** Decode a server error payload. */
export function decodeError(payload: Uint8Array): ErrorMessage {
  const obj = parseJson(payload, "error");
  if (typeof obj.code !== "string") {
    throw new ProtocolError("error payload needs a string code");
  }
  return { code: obj.code, message: String(obj.message ?? "") };
}
