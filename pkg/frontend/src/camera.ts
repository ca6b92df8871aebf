/**
 * First-person camera: WASD/QE translation in the camera frame and
 * pointer-drag yaw/pitch, integrated over real elapsed time so the motion is
 * frame-rate independent.
 *
 * Quaternions are wxyz and rotate camera axes into world axes; the camera
 * looks along its local +z.
 */

export type Quat = [number, number, number, number];
export type Vec3 = [number, number, number];

export interface InputSample {
  /** held movement keys, e.g. {w: true} */
  keys: Partial<Record<"w" | "a" | "s" | "d" | "q" | "e", boolean>>;
  /** pointer drag since last sample, in pixels */
  dragX: number;
  dragY: number;
}

export interface CameraSettings {
  moveSpeed: number; // world units per second
  turnSpeed: number; // radians per pixel of drag
}

export const DEFAULT_SETTINGS: CameraSettings = { moveSpeed: 2.0, turnSpeed: 0.004 };

export function quatNormalize(q: Quat): Quat {
  const n = Math.hypot(q[0], q[1], q[2], q[3]);
  return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
}

export function quatMultiply(a: Quat, b: Quat): Quat {
  const [aw, ax, ay, az] = a;
  const [bw, bx, by, bz] = b;
  return [
    aw * bw - ax * bx - ay * by - az * bz,
    aw * bx + ax * bw + ay * bz - az * by,
    aw * by - ax * bz + ay * bw + az * bx,
    aw * bz + ax * by - ay * bx + az * bw,
  ];
}

export function quatFromAxisAngle(axis: Vec3, angle: number): Quat {
  const n = Math.hypot(axis[0], axis[1], axis[2]);
  const s = Math.sin(angle / 2) / n;
  return [Math.cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s];
}

export function rotateVector(q: Quat, v: Vec3): Vec3 {
  // v' = q v q*
  const [w, x, y, z] = q;
  const [vx, vy, vz] = v;
  const tx = 2 * (y * vz - z * vy);
  const ty = 2 * (z * vx - x * vz);
  const tz = 2 * (x * vy - y * vx);
  return [
    vx + w * tx + (y * tz - z * ty),
    vy + w * ty + (z * tx - x * tz),
    vz + w * tz + (x * ty - y * tx),
  ];
}

export interface CameraPose {
  position: Vec3;
  quat: Quat;
}

/** Advance the pose by one input sample over `dtSeconds` of real time. */
export function integrate(
  pose: CameraPose,
  input: InputSample,
  dtSeconds: number,
  settings: CameraSettings = DEFAULT_SETTINGS,
): CameraPose {
  // rotation first: yaw about the camera's up axis, pitch about its right axis
  let quat = pose.quat;
  if (input.dragX !== 0) {
    const up = rotateVector(quat, [0, -1, 0]);
    quat = quatMultiply(quatFromAxisAngle(up, input.dragX * settings.turnSpeed), quat);
  }
  if (input.dragY !== 0) {
    const right = rotateVector(quat, [1, 0, 0]);
    quat = quatMultiply(quatFromAxisAngle(right, input.dragY * settings.turnSpeed), quat);
  }
  quat = quatNormalize(quat);

  // translation in the camera frame: forward +z, right +x, up -y
  const k = input.keys;
  const local: Vec3 = [
    (k.d ? 1 : 0) - (k.a ? 1 : 0),
    (k.q ? 1 : 0) - (k.e ? 1 : 0),
    (k.w ? 1 : 0) - (k.s ? 1 : 0),
  ];
  const norm = Math.hypot(local[0], local[1], local[2]);
  let position = pose.position;
  if (norm > 0) {
    const world = rotateVector(quat, local);
    const step = (settings.moveSpeed * dtSeconds) / norm;
    position = [
      position[0] + world[0] * step,
      position[1] + world[1] * step,
      position[2] + world[2] * step,
    ];
  }
  return { position, quat };
}
