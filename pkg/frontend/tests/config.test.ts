import { describe, expect, it } from "vitest";

import { DEFAULT_CONFIG, parseViewerConfig, serviceUrl } from "../src/config.js";

describe("parseViewerConfig", () => {
  it("returns defaults for an empty query", () => {
    expect(parseViewerConfig("")).toEqual(DEFAULT_CONFIG);
    expect(parseViewerConfig("?")).toEqual(DEFAULT_CONFIG);
  });

  it("reads every knob and tolerates the leading question mark", () => {
    const config = parseViewerConfig(
      "?host=10.0.0.9&port=9100&width=960&height=540&fov=0.7&mode=fly&audio=0",
    );
    expect(config).toEqual({
      host: "10.0.0.9",
      port: 9100,
      width: 960,
      height: 540,
      fovY: 0.7,
      mode: "fly",
      audio: false,
    });
  });

  it("clamps sizes to what the service will accept", () => {
    const config = parseViewerConfig("width=99999&height=4&port=70000");
    expect(config.width).toBe(1280);
    expect(config.height).toBe(16);
    expect(config.port).toBe(65535);
  });

  it("falls back on malformed numbers and unknown modes", () => {
    const config = parseViewerConfig("?fov=banana&mode=teleport&port=abc");
    expect(config.fovY).toBe(DEFAULT_CONFIG.fovY);
    expect(config.mode).toBe("orbit");
    expect(config.port).toBe(DEFAULT_CONFIG.port);
  });

  it("rejects out-of-range fields of view", () => {
    expect(parseViewerConfig("fov=0").fovY).toBe(DEFAULT_CONFIG.fovY);
    expect(parseViewerConfig("fov=3.2").fovY).toBe(DEFAULT_CONFIG.fovY);
  });
});

describe("serviceUrl", () => {
  it("builds a websocket url from host and port", () => {
    expect(serviceUrl({ ...DEFAULT_CONFIG, host: "example.test", port: 9000 })).toBe(
      "ws://example.test:9000",
    );
  });
});
