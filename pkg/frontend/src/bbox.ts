/** Canvas-to-pixel box arithmetic: drags map to integer pixel boxes that
 * always satisfy the box invariants, and server windows map back to canvas
 * rectangles by pure scaling. */

import type { Box, Mode, ResultRow } from "./types.js";

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

/**
 * Convert a drag in canvas coordinates into an image-pixel box.
 *
 * Corners may arrive in any order. The covered pixel range is
 * floor(min/zoom) .. ceil(max/zoom), which is exact division whenever the
 * zoom is an integer and the drag endpoints sit on pixel boundaries. The
 * result is clamped to the image; a drag that covers no full pixel yields
 * null and must not produce a request.
 */
export function dragToBox(
  ax: number, ay: number, bx: number, by: number,
  zoom: number, imgW: number, imgH: number,
): Box | null {
  const x1 = clamp(Math.floor(Math.min(ax, bx) / zoom), 0, imgW);
  const x2 = clamp(Math.ceil(Math.max(ax, bx) / zoom), 0, imgW);
  const y1 = clamp(Math.floor(Math.min(ay, by) / zoom), 0, imgH);
  const y2 = clamp(Math.ceil(Math.max(ay, by) / zoom), 0, imgH);
  if (x1 >= x2 || y1 >= y2) return null;
  return { x1, y1, x2, y2 };
}

/** True when the box is non-empty and inside a w-by-h image. */
export function boxValid(box: Box, w: number, h: number): boolean {
  return (
    Number.isInteger(box.x1) && Number.isInteger(box.y1) &&
    Number.isInteger(box.x2) && Number.isInteger(box.y2) &&
    box.x1 >= 0 && box.x1 < box.x2 && box.x2 <= w &&
    box.y1 >= 0 && box.y1 < box.y2 && box.y2 <= h
  );
}

export interface CanvasRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

/** Scale a pixel-space rectangle onto a zoomed canvas, coordinates verbatim. */
export function toCanvasRect(box: Box, zoom: number): CanvasRect {
  return {
    left: box.x1 * zoom,
    top: box.y1 * zoom,
    width: (box.x2 - box.x1) * zoom,
    height: (box.y2 - box.y1) * zoom,
  };
}

/**
 * Overlay rectangle for one result thumbnail: only local-mode results carry
 * a matched window, and switching the view back to global hides overlays.
 */
export function overlayRect(
  row: ResultRow, viewMode: Mode, zoom: number,
): CanvasRect | null {
  if (viewMode !== "local" || !row.window) return null;
  const [x1, y1, x2, y2] = row.window;
  return toCanvasRect({ x1, y1, x2, y2 }, zoom);
}
