/**
 * Browser entry point: one event loop drives input sampling, the fixed-rate
 * pose channel, and frame drawing. Expects the rendering server behind a
 * binary WebSocket bridge (e.g. websockify) at ?server=ws://host:port.
 */

import { ViewerClient } from "./client.js";
import { ControlLoop } from "./controlLoop.js";
import { buildOverlays } from "./overlays.js";
import { toggleOverlay } from "./state.js";

function drawFrame(canvas: HTMLCanvasElement, client: ViewerClient): void {
  const frame = client.state.lastFrame;
  const ctx = canvas.getContext("2d");
  if (!frame || !ctx) return;
  const { width, height } = frame.header;
  canvas.width = width;
  canvas.height = height;
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let i = 0, j = 0; i < frame.pixels.length; i += 3, j += 4) {
    rgba[j] = frame.pixels[i];
    rgba[j + 1] = frame.pixels[i + 1];
    rgba[j + 2] = frame.pixels[i + 2];
    rgba[j + 3] = 255;
  }
  ctx.putImageData(new ImageData(rgba, width, height), 0, 0);
}

function drawHud(hud: HTMLElement, client: ViewerClient): void {
  const header = client.state.lastFrame?.header ?? null;
  const items = buildOverlays(header, client.state.overlays, null);
  hud.textContent = items
    .map((item) => {
      if (item.kind === "text") return `${item.label}: ${item.value}`;
      if (item.kind === "gauge") return `${item.label}: ${(item.fraction * 100).toFixed(0)}%`;
      if (item.kind === "indicator") return item.active ? `${item.label}!` : "";
      return `${item.label}: (${item.cell[0]}, ${item.cell[1]})`;
    })
    .filter(Boolean)
    .join("  |  ");
}

export function start(): void {
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  const hud = document.getElementById("hud") as HTMLElement;
  const url = new URLSearchParams(location.search).get("server") ?? "ws://127.0.0.1:9001";

  const client = new ViewerClient();
  const socket = new WebSocket(url);
  socket.binaryType = "arraybuffer";
  client.connecting();

  const loop = new ControlLoop({ send: (bytes) => socket.send(bytes) }, {
    position: [0, 0, 5],
    quat: [0, 1, 0, 0],
  });

  const held: Record<string, boolean> = {};
  addEventListener("keydown", (e) => {
    held[e.key] = true;
    if (e.key === "g") client.state = toggleOverlay(client.state, "cellGrid");
    if (e.key === "m") client.state = toggleOverlay(client.state, "memoryGauge");
    if (e.key === "b") client.state = toggleOverlay(client.state, "bufferStatus");
  });
  addEventListener("keyup", (e) => {
    held[e.key] = false;
  });
  canvas.addEventListener("pointermove", (e) => {
    if (e.buttons & 1) loop.input({ dragX: e.movementX, dragY: e.movementY });
  });

  socket.addEventListener("open", () => {
    const step = (now: number) => {
      loop.input({
        keys: {
          w: held.w, a: held.a, s: held.s, d: held.d, q: held.q, e: held.e,
        },
      });
      loop.tick(now);
      drawFrame(canvas, client);
      drawHud(hud, client);
      requestAnimationFrame(step);
    };
    requestAnimationFrame(step);
  });
  socket.addEventListener("message", (e) => client.receive(new Uint8Array(e.data as ArrayBuffer)));
  socket.addEventListener("close", () => client.disconnected());
}
