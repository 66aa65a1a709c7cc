/** Entry point: wires the canvas, controls, and service calls together. */

import { QueryGate, submitQuery, type Transport } from "./api.js";
import { dragToBox } from "./bbox.js";
import {
  renderError, renderQueryBox, renderResults, renderStatus,
} from "./render.js";
import {
  applyError, applyResults, beginSubmit, canSubmit, initialState,
  selectImage, setBox, setK, setMode, setN,
} from "./state.js";
import type { HealthInfo, Mode, UiState } from "./types.js";

const CANVAS_ZOOM = 4;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

const transport: Transport = (url, init) => fetch(url, init);

function main(): void {
  let state: UiState = initialState();
  const gate = new QueryGate();

  const statusEl = el<HTMLSpanElement>("status");
  const errorEl = el<HTMLDivElement>("error");
  const canvas = el<HTMLCanvasElement>("query-canvas");
  const boxEl = el<HTMLDivElement>("query-box");
  const grid = el<HTMLDivElement>("results");
  const idInput = el<HTMLInputElement>("image-id");
  const loadBtn = el<HTMLButtonElement>("load-id");
  const fileInput = el<HTMLInputElement>("image-file");
  const kInput = el<HTMLInputElement>("k-input");
  const nInput = el<HTMLInputElement>("n-input");
  const modeGlobal = el<HTMLInputElement>("mode-global");
  const modeLocal = el<HTMLInputElement>("mode-local");
  const submitBtn = el<HTMLButtonElement>("submit");
  const clearBtn = el<HTMLButtonElement>("clear-box");
  const ctx = canvas.getContext("2d");
  if (ctx === null) throw new Error("canvas 2d context unavailable");

  function sync(): void {
    modeLocal.disabled = state.bbox === null;
    modeGlobal.checked = state.mode === "global";
    modeLocal.checked = state.mode === "local";
    nInput.disabled = state.mode !== "local";
    submitBtn.disabled = !canSubmit(state);
    clearBtn.disabled = state.bbox === null;
    kInput.value = String(state.k);
    nInput.value = String(state.n);
    renderError(errorEl, state.error);
    renderQueryBox(boxEl, state.bbox, CANVAS_ZOOM);
    renderResults(grid, state.results, state.resultsMode ?? state.mode);
  }

  function update(next: UiState): void {
    state = next;
    sync();
  }

  function showImage(img: HTMLImageElement): void {
    canvas.width = img.naturalWidth * CANVAS_ZOOM;
    canvas.height = img.naturalHeight * CANVAS_ZOOM;
    ctx!.imageSmoothingEnabled = false;
    ctx!.drawImage(img, 0, 0, canvas.width, canvas.height);
  }

  function loadById(id: number): void {
    const img = new Image();
    img.onload = () => {
      showImage(img);
      update(selectImage(state, { kind: "id", id },
                         { w: img.naturalWidth, h: img.naturalHeight }));
    };
    img.onerror = () => update(applyError(state, `image ${id} not found`));
    img.src = `/image/${id}`;
  }

  loadBtn.addEventListener("click", () => {
    const id = Number(idInput.value);
    if (Number.isInteger(id) && id >= 0) loadById(id);
  });

  fileInput.addEventListener("change", () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    const reader = new FileReader();
    reader.onload = () => {
      const dataUrl = String(reader.result);
      const img = new Image();
      img.onload = () => {
        showImage(img);
        update(selectImage(state, { kind: "upload", b64: dataUrl, name: file.name },
                           { w: img.naturalWidth, h: img.naturalHeight }));
      };
      img.src = dataUrl;
    };
    reader.readAsDataURL(file);
  });

  // box drawing: track the drag in canvas coordinates
  let dragStart: { x: number; y: number } | null = null;

  function canvasPoint(ev: MouseEvent): { x: number; y: number } {
    const rect = canvas.getBoundingClientRect();
    return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  }

  canvas.addEventListener("mousedown", (ev) => {
    if (state.imageSize === null) return;
    dragStart = canvasPoint(ev);
  });

  canvas.addEventListener("mousemove", (ev) => {
    if (dragStart === null || state.imageSize === null) return;
    const p = canvasPoint(ev);
    const box = dragToBox(dragStart.x, dragStart.y, p.x, p.y, CANVAS_ZOOM,
                          state.imageSize.w, state.imageSize.h);
    renderQueryBox(boxEl, box, CANVAS_ZOOM);
  });

  window.addEventListener("mouseup", (ev) => {
    if (dragStart === null || state.imageSize === null) return;
    const p = canvasPoint(ev);
    const box = dragToBox(dragStart.x, dragStart.y, p.x, p.y, CANVAS_ZOOM,
                          state.imageSize.w, state.imageSize.h);
    dragStart = null;
    update(setBox(state, box));
  });

  clearBtn.addEventListener("click", () => update(setBox(state, null)));

  modeGlobal.addEventListener("change", () => update(setMode(state, "global")));
  modeLocal.addEventListener("change", () => update(setMode(state, "local")));
  kInput.addEventListener("change", () => update(setK(state, Number(kInput.value))));
  nInput.addEventListener("change", () => update(setN(state, Number(nInput.value))));

  submitBtn.addEventListener("click", () => {
    if (!canSubmit(state)) return;
    const mode: Mode = state.mode;
    update(beginSubmit(state));
    void submitQuery(transport, state, gate).then((outcome) => {
      if (outcome.kind === "stale") return;
      if (outcome.kind === "ok") {
        update(applyResults(state, outcome.rows, mode));
      } else {
        update(applyError(state, outcome.message));
      }
    });
  });

  async function pollHealth(): Promise<void> {
    try {
      const resp = await fetch("/health");
      renderStatus(statusEl, resp.ok ? ((await resp.json()) as HealthInfo) : null);
    } catch {
      renderStatus(statusEl, null);
    }
  }

  void pollHealth();
  window.setInterval(() => void pollHealth(), 10000);
  sync();
}

main();
