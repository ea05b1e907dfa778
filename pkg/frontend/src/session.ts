/**
 * Client session over any byte transport.
 *
 * Owns the message parser, routes decoded frames/audio/errors to event
 * callbacks, tracks sequence numbers, and rate-limits outgoing poses to
 * the server-friendly ceiling with latest-wins coalescing: a burst of pose
 * updates collapses to at most one message per interval, and the newest
 * pose always gets sent eventually.
 */

import {
  MSG_AUDIO,
  MSG_ERROR,
  MSG_FRAME,
  MessageParser,
  ProtocolError,
  decodeAudio,
  decodeError,
  decodeFrame,
  encodeControl,
  encodePose,
} from "./protocol.js";
import type {
  AudioHeader,
  ErrorMessage,
  FrameHeader,
  PoseMessage,
} from "./protocol.js";

/** Ceiling on outgoing pose messages per second. */
export const MAX_POSE_RATE_HZ = 60;

const MIN_POSE_INTERVAL_MS = 1000 / MAX_POSE_RATE_HZ;

/** Minimal byte pipe the session drives; see transport.ts for WebSocket. */
export interface Transport {
  send(data: Uint8Array): void;
  close(): void;
  onData(handler: (chunk: Uint8Array) => void): void;
  onClose(handler: () => void): void;
}

export interface SessionEvents {
  onFrame?(header: FrameHeader, jpeg: Uint8Array): void;
  onAudio?(header: AudioHeader, samples: Float32Array): void;
  /** The server reported a failure (it closes the connection after). */
  onServerError?(error: ErrorMessage): void;
  /** Locally unparseable bytes; the session closes itself. */
  onProtocolError?(error: ProtocolError): void;
  onClose?(): void;
}

export interface SessionStats {
  framesReceived: number;
  audioBlocksReceived: number;
  posesSent: number;
  lastFrameSeq: number;
  lastAudioSeq: number;
  /** Frames whose seq failed to increase (should stay zero). */
  frameSeqRegressions: number;
  /** Audio blocks whose seq failed to increase (should stay zero). */
  audioSeqRegressions: number;
}

export class ViewerSession {
  readonly stats: SessionStats = {
    framesReceived: 0,
    audioBlocksReceived: 0,
    posesSent: 0,
    lastFrameSeq: -1,
    lastAudioSeq: -1,
    frameSeqRegressions: 0,
    audioSeqRegressions: 0,
  };

  private readonly parser = new MessageParser();
  private readonly now: () => number;
  private pendingPose: PoseMessage | null = null;
  private poseTimer: ReturnType<typeof setTimeout> | null = null;
  private lastPoseSentAt = Number.NEGATIVE_INFINITY;
  private closed = false;

  constructor(
    private readonly transport: Transport,
    private readonly events: SessionEvents = {},
    now: () => number = () => Date.now(),
  ) {
    this.now = now;
    transport.onData((chunk) => this.receive(chunk));
    transport.onClose(() => this.handleClose());
  }

  /**
   * Queue a pose for sending. Within one rate interval newer poses replace
   * older unsent ones; the latest pose is flushed when the interval opens.
   */
  sendPose(pose: PoseMessage): void {
    if (this.closed) {
      return;
    }
    this.pendingPose = pose;
    this.pumpPose();
  }

  play(): void {
    this.sendControl(encodeControl("play"));
  }

  pause(): void {
    this.sendControl(encodeControl("pause"));
  }

  seek(t: number): void {
    this.sendControl(encodeControl("seek", t));
  }

  close(): void {
    if (this.closed) {
      return;
    }
    this.closed = true;
    if (this.poseTimer !== null) {
      clearTimeout(this.poseTimer);
      this.poseTimer = null;
    }
    this.transport.close();
  }

  get isClosed(): boolean {
    return this.closed;
  }

  private sendControl(data: Uint8Array): void {
    if (!this.closed) {
      this.transport.send(data);
    }
  }

  private pumpPose(): void {
    if (this.closed || this.pendingPose === null || this.poseTimer !== null) {
      return;
    }
    const wait = this.lastPoseSentAt + MIN_POSE_INTERVAL_MS - this.now();
    if (wait <= 0) {
      this.flushPose();
      return;
    }
    this.poseTimer = setTimeout(() => {
      this.poseTimer = null;
      if (this.pendingPose !== null) {
        this.flushPose();
      }
    }, wait);
  }

  private flushPose(): void {
    const pose = this.pendingPose;
    if (pose === null || this.closed) {
      return;
    }
    this.pendingPose = null;
    this.lastPoseSentAt = this.now();
    this.transport.send(encodePose(pose));
    this.stats.posesSent += 1;
  }

  private receive(chunk: Uint8Array): void {
    if (this.closed) {
      return;
    }
    try {
      for (const message of this.parser.feed(chunk)) {
        this.dispatch(message.type, message.payload);
      }
    } catch (err) {
      if (err instanceof ProtocolError) {
        this.events.onProtocolError?.(err);
        this.close();
        return;
      }
      throw err;
    }
  }

  private dispatch(type: number, payload: Uint8Array): void {
    if (type === MSG_FRAME) {
      const { header, jpeg } = decodeFrame(payload);
      if (header.seq <= this.stats.lastFrameSeq) {
        this.stats.frameSeqRegressions += 1;
      }
      this.stats.lastFrameSeq = header.seq;
      this.stats.framesReceived += 1;
      this.events.onFrame?.(header, jpeg);
    } else if (type === MSG_AUDIO) {
      const { header, samples } = decodeAudio(payload);
      if (header.seq <= this.stats.lastAudioSeq) {
        this.stats.audioSeqRegressions += 1;
      }
      this.stats.lastAudioSeq = header.seq;
      this.stats.audioBlocksReceived += 1;
      this.events.onAudio?.(header, samples);
    } else if (type === MSG_ERROR) {
      this.events.onServerError?.(decodeError(payload));
    } else {
      throw new ProtocolError(`server sent unknown message type 0x${type.toString(16)}`);
    }
  }

  private handleClose(): void {
    if (this.closed) {
      return;
    }
    this.closed = true;
    if (this.poseTimer !== null) {
      clearTimeout(this.poseTimer);
      this.poseTimer = null;
    }
    this.events.onClose?.();
  }
}
