/**
 * Viewer configuration from the page URL's query string, e.g.
 * `?host=192.168.0.5&port=9000&width=960&height=540&mode=fly&audio=0`.
 */

import { MAX_FRAME_HEIGHT, MAX_FRAME_WIDTH } from "./protocol.js";

export interface ViewerConfig {
  host: string;
  port: number;
  width: number;
  height: number;
  /** Vertical field of view in radians. */
  fovY: number;
  mode: "orbit" | "fly";
  audio: boolean;
}

export const DEFAULT_CONFIG: ViewerConfig = {
  host: "127.0.0.1",
  port: 8765,
  width: 640,
  height: 360,
  fovY: 1.0,
  mode: "orbit",
  audio: true,
};

function clampInt(
  raw: string | null,
  fallback: number,
  lo: number,
  hi: number,
): number {
  const value = raw === null ? NaN : Number.parseInt(raw, 10);
  if (!Number.isFinite(value)) {
    return fallback;
  }
  return Math.min(Math.max(value, lo), hi);
}

/** Parse a query string ("?a=b" or "a=b"); unknown keys are ignored. */
export function parseViewerConfig(query: string): ViewerConfig {
  const params = new URLSearchParams(
    query.startsWith("?") ? query.slice(1) : query,
  );
  const fovRaw = Number.parseFloat(params.get("fov") ?? "");
  const mode = params.get("mode");
  return {
    host: params.get("host") ?? DEFAULT_CONFIG.host,
    port: clampInt(params.get("port"), DEFAULT_CONFIG.port, 1, 65535),
    width: clampInt(params.get("width"), DEFAULT_CONFIG.width, 16, MAX_FRAME_WIDTH),
    height: clampInt(params.get("height"), DEFAULT_CONFIG.height, 16, MAX_FRAME_HEIGHT),
    fovY:
      Number.isFinite(fovRaw) && fovRaw > 0 && fovRaw < Math.PI
        ? fovRaw
        : DEFAULT_CONFIG.fovY,
    mode: mode === "fly" ? "fly" : "orbit",
    audio: params.get("audio") !== "0",
  };
}

/** WebSocket URL for a configured service endpoint. */
export function serviceUrl(config: ViewerConfig): string {
  return `ws://${config.host}:${config.port}`;
}
