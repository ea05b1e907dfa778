/**
 * Browser entry point: wires the URL-configured session to a canvas, the
 * pointer/keyboard to a camera rig, and incoming audio blocks to the
 * speakers. All rendering happens server-side; this file only decodes JPEG
 * bytes the service already rasterized.
 */

import { PlaybackRing } from "./audio.js";
import { parseViewerConfig, serviceUrl } from "./config.js";
import { FlyRig, OrbitRig } from "./pose.js";
import type { CameraRig, MoveInput } from "./pose.js";
import type { AudioHeader, FrameHeader } from "./protocol.js";
import { ViewerSession } from "./session.js";
import { WebSocketTransport } from "./transport.js";

const POINTER_SENSITIVITY = 0.008;
const WHEEL_ZOOM_STEP = 1.1;
const AUDIO_PULL_SIZE = 1024;

class SpeakerOutput {
  private readonly ring = new PlaybackRing();
  private context: AudioContext | null = null;

  push(header: AudioHeader, samples: Float32Array): void {
    if (this.context === null) {
      this.context = new AudioContext({ sampleRate: header.sample_rate });
      const node = this.context.createScriptProcessor(AUDIO_PULL_SIZE, 0, 2);
      const scratch = new Float32Array(AUDIO_PULL_SIZE * 2);
      node.onaudioprocess = (event: AudioProcessingEvent) => {
        this.ring.pull(scratch);
        const left = event.outputBuffer.getChannelData(0);
        const right = event.outputBuffer.getChannelData(1);
        for (let i = 0; i < AUDIO_PULL_SIZE; i += 1) {
          left[i] = scratch[i * 2];
          right[i] = scratch[i * 2 + 1];
        }
      };
      node.connect(this.context.destination);
    }
    this.ring.push(header.seq, samples);
  }

  clear(): void {
    this.ring.clear();
  }
}

/** Build the page and open the session; call once from the host page. */
export async function main(): Promise<void> {
  const config = parseViewerConfig(window.location.search);
  const canvas = document.createElement("canvas");
  canvas.width = config.width;
  canvas.height = config.height;
  canvas.tabIndex = 0;
  const status = document.createElement("pre");
  status.textContent = `connecting to ${serviceUrl(config)} ...`;
  const controls = document.createElement("div");
  const playButton = document.createElement("button");
  playButton.textContent = "play";
  const pauseButton = document.createElement("button");
  pauseButton.textContent = "pause";
  const timeSlider = document.createElement("input");
  timeSlider.type = "range";
  timeSlider.min = "0";
  timeSlider.max = "1";
  timeSlider.step = "0.001";
  timeSlider.value = "0";
  controls.append(playButton, pauseButton, timeSlider);
  document.body.append(status, canvas, controls);

  const ctx = canvas.getContext("2d");
  if (ctx === null) {
    status.textContent = "canvas 2d context unavailable";
    return;
  }

  const rig: CameraRig & (OrbitRig | FlyRig) =
    config.mode === "fly"
      ? new FlyRig({ position: [0, -3, 1] })
      : new OrbitRig({ radius: 3, elevation: 0.4 });
  const view = { fovY: config.fovY, width: config.width, height: config.height };
  const speakers = config.audio ? new SpeakerOutput() : null;
  let playbackTime = 0;
  let poseDirty = true;

  const transport = await WebSocketTransport.connect(serviceUrl(config)).catch(
    (err: Error) => {
      status.textContent = err.message;
      return null;
    },
  );
  if (transport === null) {
    return;
  }

  const session = new ViewerSession(transport, {
    onFrame: (header: FrameHeader, jpeg: Uint8Array) => {
      playbackTime = header.t;
      void createImageBitmap(new Blob([jpeg as BlobPart], { type: "image/jpeg" })).then(
        (bitmap) => {
          ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
          bitmap.close();
        },
      );
      status.textContent =
        `frame ${header.seq}  t=${header.t.toFixed(3)}  ` +
        `${header.width}x${header.height}  ${header.render_ms.toFixed(1)} ms  ` +
        `audio blocks ${session.stats.audioBlocksReceived}`;
    },
    onAudio: (header, samples) => speakers?.push(header, samples),
    onServerError: (error) => {
      status.textContent = `server error [${error.code}] ${error.message}`;
    },
    onClose: () => {
      status.textContent = "connection closed";
    },
  });

  playButton.onclick = () => session.play();
  pauseButton.onclick = () => session.pause();
  timeSlider.oninput = () => {
    session.seek(Number.parseFloat(timeSlider.value));
    speakers?.clear();
  };

  canvas.addEventListener("pointerdown", (down: PointerEvent) => {
    canvas.setPointerCapture(down.pointerId);
    canvas.focus();
  });
  canvas.addEventListener("pointermove", (move: PointerEvent) => {
    if (!canvas.hasPointerCapture(move.pointerId)) {
      return;
    }
    const dx = move.movementX * POINTER_SENSITIVITY;
    const dy = move.movementY * POINTER_SENSITIVITY;
    if (rig instanceof OrbitRig) {
      rig.rotate(-dx, dy);
    } else {
      rig.turn(-dx, -dy);
    }
    poseDirty = true;
  });
  canvas.addEventListener("wheel", (wheel: WheelEvent) => {
    if (rig instanceof OrbitRig) {
      rig.zoom(wheel.deltaY > 0 ? WHEEL_ZOOM_STEP : 1 / WHEEL_ZOOM_STEP);
      poseDirty = true;
    }
    wheel.preventDefault();
  });

  const held = new Set<string>();
  canvas.addEventListener("keydown", (key: KeyboardEvent) => held.add(key.code));
  canvas.addEventListener("keyup", (key: KeyboardEvent) => held.delete(key.code));

  let lastTick = performance.now();
  const tick = (nowMs: number) => {
    const dt = Math.min((nowMs - lastTick) / 1000, 0.1);
    lastTick = nowMs;
    if (rig instanceof FlyRig && held.size > 0) {
      const input: MoveInput = {
        forward: Number(held.has("KeyW")) - Number(held.has("KeyS")),
        strafe: Number(held.has("KeyD")) - Number(held.has("KeyA")),
        lift: Number(held.has("KeyE")) - Number(held.has("KeyQ")),
      };
      if (input.forward !== 0 || input.strafe !== 0 || input.lift !== 0) {
        rig.move(input, dt);
        poseDirty = true;
      }
    }
    if (poseDirty) {
      poseDirty = false;
      session.sendPose(rig.pose(playbackTime, view));
    }
    window.requestAnimationFrame(tick);
  };
  window.requestAnimationFrame(tick);
}
