/** DOM output: the results grid with distance badges and window overlays,
 * the status line, and the query-canvas box rectangle. */

import { overlayRect, toCanvasRect } from "./bbox.js";
import type { Box, HealthInfo, Mode, ResultRow } from "./types.js";

export const THUMB_ZOOM = 2;

export function renderStatus(el: HTMLElement, health: HealthInfo | null): void {
  if (health === null) {
    el.textContent = "service unreachable";
    el.dataset.state = "down";
    return;
  }
  el.textContent =
    `${health.status} · ${health.bits ?? "?"} bits · ${health.index_size} indexed`;
  el.dataset.state = health.status === "ok" ? "up" : "down";
}

export function renderError(el: HTMLElement, message: string | null): void {
  el.textContent = message ?? "";
  el.hidden = message === null;
}

/** Rectangle the user is drawing (or has drawn) on the query canvas. */
export function renderQueryBox(
  el: HTMLElement, box: Box | null, zoom: number,
): void {
  if (box === null) {
    el.hidden = true;
    return;
  }
  const rect = toCanvasRect(box, zoom);
  el.hidden = false;
  el.style.left = `${rect.left}px`;
  el.style.top = `${rect.top}px`;
  el.style.width = `${rect.width}px`;
  el.style.height = `${rect.height}px`;
}

export function renderResults(
  grid: HTMLElement, rows: ResultRow[] | null, viewMode: Mode,
): void {
  grid.replaceChildren();
  if (rows === null) return;
  rows.forEach((row, i) => {
    const card = document.createElement("figure");
    card.className = "result";

    const frame = document.createElement("div");
    frame.className = "thumb-frame";
    const img = document.createElement("img");
    img.src = `/image/${row.id}`;
    img.alt = `result ${row.id}`;
    img.addEventListener("load", () => {
      img.style.width = `${img.naturalWidth * THUMB_ZOOM}px`;
    });
    frame.appendChild(img);

    const overlay = overlayRect(row, viewMode, THUMB_ZOOM);
    if (overlay !== null) {
      const rect = document.createElement("div");
      rect.className = "window-overlay";
      rect.style.left = `${overlay.left}px`;
      rect.style.top = `${overlay.top}px`;
      rect.style.width = `${overlay.width}px`;
      rect.style.height = `${overlay.height}px`;
      frame.appendChild(rect);
    }
    card.appendChild(frame);

    const caption = document.createElement("figcaption");
    const rank = document.createElement("span");
    rank.className = "rank";
    rank.textContent = `#${i + 1}`;
    const badge = document.createElement("span");
    badge.className = "badge";
    badge.textContent = `d=${row.distance}`;
    const name = document.createElement("span");
    name.className = "name";
    name.textContent = row.path ?? `id ${row.id}`;
    caption.append(rank, badge, name);
    card.appendChild(caption);

    grid.appendChild(card);
  });
}
