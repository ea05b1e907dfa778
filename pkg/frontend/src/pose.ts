/**
 * Camera rigs that turn user input into pose messages.
 *
 * World frame: +z is up. Camera frame: +x right, +y down, +z forward, so a
 * pose's orientation quaternion carries camera axes into world axes. The
 * server derives the audio listener's heading from the forward axis
 * projected to the ground plane, with heading zero along world +y.
 */

import type { PoseMessage } from "./protocol.js";

export type Vec3 = [number, number, number];

/** Unit quaternion in (w, x, y, z) order. */
export type Quaternion = [number, number, number, number];

const WORLD_UP: Vec3 = [0, 0, 1];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) {
    throw new RangeError("cannot normalize a zero vector");
  }
  return scale(a, 1 / n);
}

/** Rotation matrix (rows) of a unit quaternion. */
export function quaternionToMatrix(q: Quaternion): number[][] {
  const [w, x, y, z] = q;
  return [
    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
  ];
}

/** Unit quaternion of a rotation matrix (Shepperd's method). */
export function matrixToQuaternion(m: ReadonlyArray<ReadonlyArray<number>>): Quaternion {
  const trace = m[0][0] + m[1][1] + m[2][2];
  let q: Quaternion;
  if (trace > 0) {
    const s = Math.sqrt(trace + 1) * 2;
    q = [
      0.25 * s,
      (m[2][1] - m[1][2]) / s,
      (m[0][2] - m[2][0]) / s,
      (m[1][0] - m[0][1]) / s,
    ];
  } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
    const s = Math.sqrt(1 + m[0][0] - m[1][1] - m[2][2]) * 2;
    q = [
      (m[2][1] - m[1][2]) / s,
      0.25 * s,
      (m[0][1] + m[1][0]) / s,
      (m[0][2] + m[2][0]) / s,
    ];
  } else if (m[1][1] > m[2][2]) {
    const s = Math.sqrt(1 + m[1][1] - m[0][0] - m[2][2]) * 2;
    q = [
      (m[0][2] - m[2][0]) / s,
      (m[0][1] + m[1][0]) / s,
      0.25 * s,
      (m[1][2] + m[2][1]) / s,
    ];
  } else {
    const s = Math.sqrt(1 + m[2][2] - m[0][0] - m[1][1]) * 2;
    q = [
      (m[1][0] - m[0][1]) / s,
      (m[0][2] + m[2][0]) / s,
      (m[1][2] + m[2][1]) / s,
      0.25 * s,
    ];
  }
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

/**
 * Camera-to-world orientation looking from `eye` toward `target`, upright
 * against world +z. Falls back to world +x as "right" when looking straight
 * up or down.
 */
export function lookAtOrientation(eye: Vec3, target: Vec3): Quaternion {
  const forward = normalize(sub(target, eye));
  let right = cross(forward, WORLD_UP);
  if (norm(right) < 1e-8) {
    right = [1, 0, 0];
  }
  right = normalize(right);
  const down = cross(forward, right);
  // Columns of camera-to-world are the camera axes expressed in world space.
  return matrixToQuaternion([
    [right[0], down[0], forward[0]],
    [right[1], down[1], forward[1]],
    [right[2], down[2], forward[2]],
  ]);
}

/** View-independent pose fields shared by every rig. */
export interface ViewSettings {
  fovY: number;
  width: number;
  height: number;
}

/** Something that can produce the pose to render next. */
export interface CameraRig {
  pose(t: number, view: ViewSettings): PoseMessage;
}

const MAX_ELEVATION = Math.PI / 2 - 0.01;

/** Orbit rig: the camera circles a target point at a set distance. */
export class OrbitRig implements CameraRig {
  target: Vec3;
  radius: number;
  azimuth: number;
  elevation: number;
  minRadius: number;
  maxRadius: number;

  constructor(options: {
    target?: Vec3;
    radius?: number;
    azimuth?: number;
    elevation?: number;
    minRadius?: number;
    maxRadius?: number;
  } = {}) {
    this.target = options.target ?? [0, 0, 0];
    this.radius = options.radius ?? 3;
    this.azimuth = options.azimuth ?? 0;
    this.elevation = options.elevation ?? 0.3;
    this.minRadius = options.minRadius ?? 0.2;
    this.maxRadius = options.maxRadius ?? 50;
  }

  /** Swing around the target; positive azimuth turns counterclockwise. */
  rotate(dAzimuth: number, dElevation: number): void {
    this.azimuth += dAzimuth;
    this.elevation = Math.min(
      Math.max(this.elevation + dElevation, -MAX_ELEVATION),
      MAX_ELEVATION,
    );
  }

  /** Multiply the orbit distance; values below one move closer. */
  zoom(factor: number): void {
    this.radius = Math.min(
      Math.max(this.radius * factor, this.minRadius),
      this.maxRadius,
    );
  }

  position(): Vec3 {
    const horizontal = Math.cos(this.elevation) * this.radius;
    return add(this.target, [
      horizontal * Math.sin(this.azimuth),
      -horizontal * Math.cos(this.azimuth),
      Math.sin(this.elevation) * this.radius,
    ]);
  }

  pose(t: number, view: ViewSettings): PoseMessage {
    const position = this.position();
    return {
      position,
      orientation: lookAtOrientation(position, this.target),
      t,
      fovY: view.fovY,
      width: view.width,
      height: view.height,
    };
  }
}

const MAX_PITCH = 1.3;

/** Per-step movement intent, each component in [-1, 1]. */
export interface MoveInput {
  /** Along the view direction projected to the ground plane. */
  forward: number;
  /** To the camera's right. */
  strafe: number;
  /** Straight up in world space. */
  lift: number;
}

/** Free-fly rig: WASD-style translation plus yaw/pitch look. */
export class FlyRig implements CameraRig {
  position: Vec3;
  yaw: number;
  pitch: number;
  speed: number;

  constructor(options: {
    position?: Vec3;
    yaw?: number;
    pitch?: number;
    speed?: number;
  } = {}) {
    this.position = options.position ?? [0, 0, 1];
    this.yaw = options.yaw ?? 0;
    this.pitch = options.pitch ?? 0;
    this.speed = options.speed ?? 2;
  }

  /** Ground-plane view direction; heading zero faces world +y. */
  forwardFlat(): Vec3 {
    return [-Math.sin(this.yaw), Math.cos(this.yaw), 0];
  }

  /** Full view direction including pitch. */
  forward(): Vec3 {
    const cp = Math.cos(this.pitch);
    return [
      -Math.sin(this.yaw) * cp,
      Math.cos(this.yaw) * cp,
      Math.sin(this.pitch),
    ];
  }

  turn(dYaw: number, dPitch: number): void {
    this.yaw += dYaw;
    this.pitch = Math.min(Math.max(this.pitch + dPitch, -MAX_PITCH), MAX_PITCH);
  }

  /** Advance the position by one input step over `dt` seconds. */
  move(input: MoveInput, dt: number): void {
    const ahead = this.forwardFlat();
    const right: Vec3 = [ahead[1], -ahead[0], 0];
    const step = this.speed * dt;
    this.position = add(
      this.position,
      add(
        add(scale(ahead, input.forward * step), scale(right, input.strafe * step)),
        scale([0, 0, 1], input.lift * step),
      ),
    );
  }

  pose(t: number, view: ViewSettings): PoseMessage {
    const ahead = this.forward();
    return {
      position: [...this.position],
      orientation: lookAtOrientation(this.position, add(this.position, ahead)),
      t,
      fovY: view.fovY,
      width: view.width,
      height: view.height,
    };
  }
}
