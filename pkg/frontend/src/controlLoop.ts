/**
 * Fixed-rate pose sender. Input events update the pending pose latest-wins;
 * each tick sends at most one pose message (a heartbeat when nothing moved),
 * matching the server's one-frame-per-pose contract.
 */

import { CameraPose, InputSample, integrate, CameraSettings, DEFAULT_SETTINGS } from "./camera.js";
import { Pose, encodePoseMessage } from "./protocol.js";

export interface Transport {
  send(bytes: Uint8Array): void;
}

export interface ControlLoopOptions {
  tickHz?: number;
  fovDeg?: number;
  settings?: CameraSettings;
}

export class ControlLoop {
  readonly tickMs: number;
  private pose: CameraPose;
  private fovDeg: number;
  private settings: CameraSettings;
  private pendingInput: InputSample = { keys: {}, dragX: 0, dragY: 0 };
  private lastTickMs: number | null = null;
  private sent = 0;

  constructor(
    private transport: Transport,
    start: CameraPose,
    options: ControlLoopOptions = {},
  ) {
    this.tickMs = 1000 / (options.tickHz ?? 30);
    this.pose = start;
    this.fovDeg = options.fovDeg ?? 60;
    this.settings = options.settings ?? DEFAULT_SETTINGS;
  }

  /** Merge an input event into the pending sample (latest-wins for drags). */
  input(sample: Partial<InputSample>): void {
    if (sample.keys) this.pendingInput.keys = sample.keys;
    if (sample.dragX !== undefined) this.pendingInput.dragX += sample.dragX;
    if (sample.dragY !== undefined) this.pendingInput.dragY += sample.dragY;
  }

  get currentPose(): CameraPose {
    return this.pose;
  }

  get sentCount(): number {
    return this.sent;
  }

  /**
   * Advance to wall-clock `nowMs`. Integrates elapsed real time and sends at
   * most one pose per elapsed tick boundary.
   */
  tick(nowMs: number): void {
    if (this.lastTickMs === null) {
      this.lastTickMs = nowMs;
      this.send(nowMs);
      return;
    }
    while (nowMs - this.lastTickMs >= this.tickMs) {
      this.lastTickMs += this.tickMs;
      const dt = this.tickMs / 1000;
      this.pose = integrate(this.pose, this.pendingInput, dt, this.settings);
      this.pendingInput = { keys: this.pendingInput.keys, dragX: 0, dragY: 0 };
      this.send(this.lastTickMs);
    }
  }

  private send(tMs: number): void {
    const pose: Pose = {
      t: tMs / 1000,
      position: this.pose.position,
      quat: this.pose.quat,
      fovDeg: this.fovDeg,
    };
    this.transport.send(encodePoseMessage(pose));
    this.sent += 1;
  }
}
