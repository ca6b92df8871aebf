/**
 * Binary wire protocol shared with the rendering server.
 *
 * Every message is `u32 LE payload length, u8 message type, payload`.
 * Pose payloads are nine little-endian f32 values:
 * t, position xyz, quaternion wxyz, field of view in degrees.
 */

export const MSG_POSE = 1;
export const MSG_FRAME = 2;
export const MSG_STATUS = 3;
export const MSG_ERROR = 4;

export const POSE_PAYLOAD_BYTES = 36;
const HEADER_BYTES = 5;

export interface Pose {
  t: number;
  position: [number, number, number];
  /** wxyz, normalized before encoding */
  quat: [number, number, number, number];
  fovDeg: number;
}

export interface StatusInfo {
  width: number;
  height: number;
  protocol: number;
  [key: string]: unknown;
}

export interface FrameHeader {
  frame: number;
  t: number;
  width: number;
  height: number;
  [key: string]: unknown;
}

export interface Frame {
  header: FrameHeader;
  /** width*height*3 RGB8 row-major pixels */
  pixels: Uint8Array;
}

export interface Message {
  type: number;
  payload: Uint8Array;
}

export function packMessage(type: number, payload: Uint8Array): Uint8Array {
  const out = new Uint8Array(HEADER_BYTES + payload.length);
  new DataView(out.buffer).setUint32(0, payload.length, true);
  out[4] = type;
  out.set(payload, HEADER_BYTES);
  return out;
}

export function encodePose(pose: Pose): Uint8Array {
  const [w, x, y, z] = pose.quat;
  const norm = Math.hypot(w, x, y, z);
  if (!(norm > 1e-6)) {
    throw new Error("pose quaternion has near-zero norm");
  }
  const out = new Uint8Array(POSE_PAYLOAD_BYTES);
  const view = new DataView(out.buffer);
  const values = [
    pose.t,
    pose.position[0],
    pose.position[1],
    pose.position[2],
    w / norm,
    x / norm,
    y / norm,
    z / norm,
    pose.fovDeg,
  ];
  values.forEach((v, i) => view.setFloat32(i * 4, v, true));
  return out;
}

export function encodePoseMessage(pose: Pose): Uint8Array {
  return packMessage(MSG_POSE, encodePose(pose));
}

const utf8 = new TextDecoder();

export function decodeStatus(payload: Uint8Array): StatusInfo {
  return JSON.parse(utf8.decode(payload)) as StatusInfo;
}

export function decodeError(payload: Uint8Array): string {
  return utf8.decode(payload);
}

export function decodeFrame(payload: Uint8Array): Frame {
  const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
  const headerLength = view.getUint32(0, true);
  const header = JSON.parse(
    utf8.decode(payload.subarray(4, 4 + headerLength)),
  ) as FrameHeader;
  const pixels = payload.subarray(4 + headerLength);
  const expected = header.width * header.height * 3;
  if (pixels.length !== expected) {
    throw new Error(`frame payload has ${pixels.length} pixel bytes, expected ${expected}`);
  }
  return { header, pixels };
}

/** Incremental splitter: feed arbitrary byte chunks, get whole messages out. */
export class MessageScanner {
  private buffer = new Uint8Array(0);

  feed(chunk: Uint8Array): Message[] {
    const merged = new Uint8Array(this.buffer.length + chunk.length);
    merged.set(this.buffer);
    merged.set(chunk, this.buffer.length);
    this.buffer = merged;

    const out: Message[] = [];
    for (;;) {
      if (this.buffer.length < HEADER_BYTES) break;
      const view = new DataView(this.buffer.buffer, this.buffer.byteOffset);
      const length = view.getUint32(0, true);
      if (this.buffer.length < HEADER_BYTES + length) break;
      out.push({
        type: this.buffer[4],
        payload: this.buffer.slice(HEADER_BYTES, HEADER_BYTES + length),
      });
      this.buffer = this.buffer.slice(HEADER_BYTES + length);
    }
    return out;
  }
}
