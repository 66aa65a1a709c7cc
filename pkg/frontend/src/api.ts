/** Wire protocol: payload construction, response parsing, and the
 * single-in-flight gate that discards superseded responses. */

import type { Mode, QueryResponse, ResultRow, UiState } from "./types.js";

export function endpointFor(mode: Mode): string {
  return mode === "local" ? "/query/local" : "/query/global";
}

export interface QueryPayload {
  image_b64?: string;
  image_id?: number;
  bbox?: [number, number, number, number];
  k: number;
  n?: number;
}

/**
 * Build the JSON body for the current state. The box is sent exactly as
 * drawn — integer pixels, no further rounding or snapping.
 */
export function buildPayload(state: UiState): QueryPayload {
  if (state.image === null) throw new Error("no query image selected");
  const payload: QueryPayload = { k: state.k };
  if (state.image.kind === "id") {
    payload.image_id = state.image.id;
  } else {
    payload.image_b64 = state.image.b64;
  }
  if (state.mode === "local") {
    if (state.bbox === null) throw new Error("local query requires a box");
    const { x1, y1, x2, y2 } = state.bbox;
    payload.bbox = [x1, y1, x2, y2];
    payload.n = state.n;
  }
  return payload;
}

export function parseResults(body: unknown): ResultRow[] {
  const rows = (body as QueryResponse)?.results;
  if (!Array.isArray(rows)) throw new Error("malformed response: no results");
  return rows.map((r) => {
    if (typeof r.id !== "number" || typeof r.distance !== "number") {
      throw new Error("malformed response row");
    }
    return r;
  });
}

/** Minimal fetch surface so tests can inject a fake transport. */
export type Transport = (
  url: string,
  init: { method: string; headers: Record<string, string>; body: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export type QueryOutcome =
  | { kind: "ok"; rows: ResultRow[]; mode: Mode }
  | { kind: "error"; message: string }
  | { kind: "stale" };

/**
 * One query in flight at a time: each submit takes a fresh ticket, and any
 * response (or failure) arriving for an older ticket is discarded.
 */
export class QueryGate {
  private seq = 0;

  issue(): number {
    return ++this.seq;
  }

  isCurrent(ticket: number): boolean {
    return ticket === this.seq;
  }
}

export async function submitQuery(
  transport: Transport, state: UiState, gate: QueryGate,
): Promise<QueryOutcome> {
  const mode = state.mode;
  const payload = buildPayload(state);
  const ticket = gate.issue();
  let outcome: QueryOutcome;
  try {
    const resp = await transport(endpointFor(mode), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!resp.ok) {
      const detail = await resp
        .json()
        .then((b) => (b as { detail?: string })?.detail)
        .catch(() => undefined);
      outcome = {
        kind: "error",
        message: detail ?? `query failed with status ${resp.status}`,
      };
    } else {
      outcome = { kind: "ok", rows: parseResults(await resp.json()), mode };
    }
  } catch (err) {
    outcome = { kind: "error", message: String(err) };
  }
  if (!gate.isCurrent(ticket)) return { kind: "stale" };
  return outcome;
}
