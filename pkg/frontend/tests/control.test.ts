import { describe, expect, it } from "vitest";

import { integrate, quatNormalize, rotateVector } from "../src/camera.js";
import { ControlLoop, Transport } from "../src/controlLoop.js";
import { MSG_POSE, MessageScanner } from "../src/protocol.js";
import { initialState, toggleOverlay } from "../src/state.js";

class CaptureTransport implements Transport {
  sent: Uint8Array[] = [];
  send(bytes: Uint8Array): void {
    this.sent.push(bytes);
  }
}

function decodePoseValues(message: Uint8Array): number[] {
  const scanner = new MessageScanner();
  const [msg] = scanner.feed(message);
  expect(msg.type).toBe(MSG_POSE);
  const view = new DataView(msg.payload.buffer, msg.payload.byteOffset);
  return Array.from({ length: 9 }, (_, i) => view.getFloat32(i * 4, true));
}

const DOWN: [number, number, number, number] = [0, 1, 0, 0];

describe("control loop", () => {
  it("sends heartbeat poses at the tick rate with no input", () => {
    const transport = new CaptureTransport();
    // 25 Hz keeps the tick interval exact in float, so the count is crisp
    const loop = new ControlLoop(transport, { position: [1, 2, 3], quat: DOWN }, { tickHz: 25 });
    loop.tick(0);
    loop.tick(1000); // one second later
    // initial send plus 25 ticks
    expect(transport.sent.length).toBe(26);
    const first = decodePoseValues(transport.sent[0]);
    const last = decodePoseValues(transport.sent.at(-1)!);
    expect(first.slice(1, 4)).toEqual([1, 2, 3]);
    expect(last.slice(1, 4)).toEqual([1, 2, 3]); // pose unchanged
  });

  it("integrates a held forward key over real elapsed time", () => {
    const transport = new CaptureTransport();
    const speed = 2.0;
    const loop = new ControlLoop(transport, { position: [0, 0, 5], quat: DOWN }, {
      tickHz: 25,
      settings: { moveSpeed: speed, turnSpeed: 0.004 },
    });
    loop.tick(0);
    loop.input({ keys: { w: true } });
    loop.tick(1000);
    const last = decodePoseValues(transport.sent.at(-1)!);
    // looking straight down: forward is -z in world space
    const forward = rotateVector(DOWN, [0, 0, 1]);
    expect(forward[2]).toBeCloseTo(-1, 12);
    expect(last[3]).toBeCloseTo(5 - speed * 1.0, 5);
    expect(last[1]).toBeCloseTo(0, 5);
  });

  it("sends at most one pose per tick regardless of input event rate", () => {
    const transport = new CaptureTransport();
    const loop = new ControlLoop(transport, { position: [0, 0, 0], quat: DOWN }, { tickHz: 30 });
    loop.tick(0);
    for (let i = 0; i < 100; i++) loop.input({ dragX: 1 });
    loop.tick(33.4); // exactly one tick elapsed
    expect(transport.sent.length).toBe(2);
  });

  it("keeps the sent quaternion normalized after drag rotations", () => {
    const transport = new CaptureTransport();
    const loop = new ControlLoop(transport, { position: [0, 0, 0], quat: DOWN }, { tickHz: 30 });
    loop.tick(0);
    for (let step = 1; step <= 60; step++) {
      loop.input({ dragX: 15, dragY: -7 });
      loop.tick(step * (1000 / 30));
    }
    const last = decodePoseValues(transport.sent.at(-1)!);
    const norm = Math.hypot(last[4], last[5], last[6], last[7]);
    expect(norm).toBeCloseTo(1, 6);
  });
});

describe("camera integration", () => {
  it("is frame-rate independent", () => {
    const input = { keys: { w: true as const }, dragX: 0, dragY: 0 };
    let coarse = { position: [0, 0, 5] as [number, number, number], quat: DOWN };
    coarse = integrate(coarse, input, 1.0);
    let fine = { position: [0, 0, 5] as [number, number, number], quat: DOWN };
    for (let i = 0; i < 100; i++) fine = integrate(fine, input, 0.01);
    for (let axis = 0; axis < 3; axis++) {
      expect(fine.position[axis]).toBeCloseTo(coarse.position[axis], 9);
    }
  });

  it("normalizes quaternions", () => {
    const q = quatNormalize([3, 0, 4, 0]);
    expect(Math.hypot(...q)).toBeCloseTo(1, 12);
  });
});

describe("overlay toggles", () => {
  it("flip without touching the rest of the state", () => {
    const state = initialState();
    const toggled = toggleOverlay(state, "cellGrid");
    expect(toggled.overlays.cellGrid).toBe(!state.overlays.cellGrid);
    expect(toggled.pose).toEqual(state.pose);
    expect(toggled.lastFrame).toBe(state.lastFrame);
  });
});
