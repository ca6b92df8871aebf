/**
 * Viewer state machine. Pure: messages in, new state out. The viewer holds
 * no scene truth of its own — everything shown comes from server messages,
 * which is what makes offline byte-stream replay exact.
 */

import {
  Frame,
  MSG_ERROR,
  MSG_FRAME,
  MSG_STATUS,
  Message,
  Pose,
  StatusInfo,
  decodeError,
  decodeFrame,
  decodeStatus,
} from "./protocol.js";

export type ConnectionState = "disconnected" | "connecting" | "connected";

export interface OverlayToggles {
  cellGrid: boolean;
  triggerZones: boolean;
  bufferStatus: boolean;
  memoryGauge: boolean;
}

export interface ViewerState {
  connection: ConnectionState;
  status: StatusInfo | null;
  pose: Pose;
  lastFrame: Frame | null;
  frameCount: number;
  lastError: string | null;
  errorCount: number;
  overlays: OverlayToggles;
}

export function initialState(): ViewerState {
  return {
    connection: "disconnected",
    status: null,
    pose: {
      t: 0,
      position: [0, 0, 5],
      quat: [0, 1, 0, 0], // looking straight down
      fovDeg: 60,
    },
    lastFrame: null,
    frameCount: 0,
    lastError: null,
    errorCount: 0,
    overlays: { cellGrid: false, triggerZones: false, bufferStatus: false, memoryGauge: true },
  };
}

export function applyMessage(state: ViewerState, message: Message): ViewerState {
  switch (message.type) {
    case MSG_STATUS:
      return { ...state, connection: "connected", status: decodeStatus(message.payload) };
    case MSG_FRAME: {
      const frame = decodeFrame(message.payload);
      return { ...state, lastFrame: frame, frameCount: state.frameCount + 1 };
    }
    case MSG_ERROR:
      // the session survives malformed input; record and keep going
      return {
        ...state,
        lastError: decodeError(message.payload),
        errorCount: state.errorCount + 1,
      };
    default:
      return {
        ...state,
        lastError: `unknown message type ${message.type}`,
        errorCount: state.errorCount + 1,
      };
  }
}

export function applyBytesReplay(
  state: ViewerState,
  messages: Message[],
): { state: ViewerState; frames: Frame[]; errors: string[] } {
  const frames: Frame[] = [];
  const errors: string[] = [];
  let current = state;
  for (const message of messages) {
    current = applyMessage(current, message);
    if (message.type === MSG_FRAME && current.lastFrame) frames.push(current.lastFrame);
    if (message.type === MSG_ERROR && current.lastError !== null) errors.push(current.lastError);
  }
  return { state: current, frames, errors };
}

export function toggleOverlay(state: ViewerState, key: keyof OverlayToggles): ViewerState {
  return { ...state, overlays: { ...state.overlays, [key]: !state.overlays[key] } };
}
