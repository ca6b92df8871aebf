/**
 * Diagnostic overlays computed as pure draw lists from the latest frame
 * header, so tests can assert on them without a canvas. Drawing them never
 * touches the frame pixels.
 */

import { FrameHeader } from "./protocol.js";
import { OverlayToggles } from "./state.js";

export type OverlayItem =
  | { kind: "text"; label: string; value: string }
  | { kind: "gauge"; label: string; fraction: number }
  | { kind: "indicator"; label: string; active: boolean }
  | { kind: "cell"; label: string; cell: [number, number] };

export function buildOverlays(
  header: FrameHeader | null,
  toggles: OverlayToggles,
  budgetBytes: number | null,
): OverlayItem[] {
  const items: OverlayItem[] = [];
  if (!header) return items;
  items.push({ kind: "text", label: "frame", value: String(header.frame) });
  if (typeof header.latency_ms === "number") {
    items.push({ kind: "text", label: "latency", value: `${header.latency_ms.toFixed(2)} ms` });
  }
  const stalls = typeof header.stalls === "number" ? header.stalls : 0;
  items.push({ kind: "indicator", label: "stall", active: stalls > 0 });
  if (toggles.memoryGauge && typeof header.resident_bytes === "number") {
    const budget = budgetBytes ?? (header.peak_resident_bytes as number | undefined) ?? null;
    if (budget && budget > 0) {
      items.push({
        kind: "gauge",
        label: "memory",
        fraction: Math.min(1, (header.resident_bytes as number) / budget),
      });
    }
  }
  if (toggles.bufferStatus && Array.isArray(header.core_cell)) {
    items.push({
      kind: "cell",
      label: "core",
      cell: [header.core_cell[0] as number, header.core_cell[1] as number],
    });
  }
  return items;
}
