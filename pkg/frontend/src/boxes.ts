/** Box geometry for drag-to-draw annotation: normalization and clamping. */

import type { Box } from './types.js';

export const MIN_BOX_SIZE = 2;

/** Turn two drag corners into a normalized box (positive width/height). */
export function dragToBox(x0: number, y0: number, x1: number, y1: number): Box {
  const x = Math.min(x0, x1);
  const y = Math.min(y0, y1);
  return {
    x: Math.round(x),
    y: Math.round(y),
    w: Math.max(Math.round(Math.abs(x1 - x0)), MIN_BOX_SIZE),
    h: Math.max(Math.round(Math.abs(y1 - y0)), MIN_BOX_SIZE),
  };
}

/** Clamp a box so it lies entirely inside a frame of the given size. */
export function clampBox(box: Box, frameW: number, frameH: number): Box {
  const w = Math.min(Math.max(box.w, MIN_BOX_SIZE), frameW);
  const h = Math.min(Math.max(box.h, MIN_BOX_SIZE), frameH);
  const x = Math.min(Math.max(box.x, 0), frameW - w);
  const y = Math.min(Math.max(box.y, 0), frameH - h);
  return { x, y, w, h };
}

export function boxInside(box: Box, frameW: number, frameH: number): boolean {
  return box.x >= 0 && box.y >= 0 && box.w > 0 && box.h > 0
    && box.x + box.w <= frameW && box.y + box.h <= frameH;
}
