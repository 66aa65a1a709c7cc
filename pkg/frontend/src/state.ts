/** Pure UI-state transitions. Every function returns a fresh state and
 * preserves the invariants: the box stays inside the image, and local mode
 * is never active without a box. */

import type { Box, ImageSource, Mode, ResultRow, UiState } from "./types.js";
import { boxValid } from "./bbox.js";

export function initialState(): UiState {
  return {
    image: null,
    imageSize: null,
    bbox: null,
    mode: "global",
    k: 10,
    n: 5,
    results: null,
    resultsMode: null,
    error: null,
    busy: false,
  };
}

/** Choosing a new query image clears the box and stale results. */
export function selectImage(
  state: UiState, image: ImageSource, size: { w: number; h: number },
): UiState {
  return {
    ...state,
    image,
    imageSize: size,
    bbox: null,
    mode: "global",
    results: null,
    resultsMode: null,
    error: null,
  };
}

/** Local mode cannot be entered until a box exists. */
export function setMode(state: UiState, mode: Mode): UiState {
  if (mode === "local" && state.bbox === null) return state;
  return { ...state, mode };
}

/** Setting null clears the box; clearing while local falls back to global. */
export function setBox(state: UiState, box: Box | null): UiState {
  if (box !== null) {
    if (state.imageSize === null) return state;
    if (!boxValid(box, state.imageSize.w, state.imageSize.h)) return state;
    return { ...state, bbox: box };
  }
  return {
    ...state,
    bbox: null,
    mode: state.mode === "local" ? "global" : state.mode,
  };
}

export function setK(state: UiState, k: number): UiState {
  return { ...state, k: Math.max(1, Math.floor(k) || 1) };
}

export function setN(state: UiState, n: number): UiState {
  return { ...state, n: Math.max(1, Math.floor(n) || 1) };
}

export function canSubmit(state: UiState): boolean {
  if (state.image === null || state.busy) return false;
  if (state.mode === "local" && state.bbox === null) return false;
  return true;
}

export function beginSubmit(state: UiState): UiState {
  return { ...state, busy: true, error: null };
}

export function applyResults(state: UiState, rows: ResultRow[], mode: Mode): UiState {
  return { ...state, busy: false, error: null, results: rows, resultsMode: mode };
}

export function applyError(state: UiState, message: string): UiState {
  return { ...state, busy: false, error: message };
}
