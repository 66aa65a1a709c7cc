/** Shared shapes for the retrieval client. */

/** Pixel-space box, inclusive-exclusive [x1,x2) x [y1,y2). */
export interface Box {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export type Mode = "global" | "local";

/** One ranked row from the service; `window` only on local queries. */
export interface ResultRow {
  id: number;
  distance: number;
  path: string | null;
  window?: [number, number, number, number];
}

export interface QueryResponse {
  results: ResultRow[];
}

/** Either an indexed image reference or an uploaded base64 PNG. */
export type ImageSource =
  | { kind: "id"; id: number }
  | { kind: "upload"; b64: string; name: string };

export interface UiState {
  image: ImageSource | null;
  /** Natural size of the selected image in pixels. */
  imageSize: { w: number; h: number } | null;
  bbox: Box | null;
  mode: Mode;
  k: number;
  n: number;
  results: ResultRow[] | null;
  /** Mode the displayed results were produced under. */
  resultsMode: Mode | null;
  error: string | null;
  busy: boolean;
}

export interface HealthInfo {
  status: string;
  bits: number | null;
  index_size: number;
}
