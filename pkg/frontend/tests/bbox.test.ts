import { describe, expect, it } from "vitest";

import { boxValid, dragToBox, overlayRect, toCanvasRect } from "../src/bbox.js";
import type { ResultRow } from "../src/types.js";

describe("dragToBox", () => {
  it("maps a 1:1 drag to the same pixel coordinates", () => {
    expect(dragToBox(10, 6, 50, 40, 1, 64, 64)).toEqual(
      { x1: 10, y1: 6, x2: 50, y2: 40 },
    );
  });

  it("divides exactly at integer zoom on pixel boundaries", () => {
    expect(dragToBox(0, 0, 256, 256, 4, 64, 64)).toEqual(
      { x1: 0, y1: 0, x2: 64, y2: 64 },
    );
    expect(dragToBox(16, 8, 48, 32, 4, 64, 64)).toEqual(
      { x1: 4, y1: 2, x2: 12, y2: 8 },
    );
  });

  it("rounds partial pixels outward so the drawn area is covered", () => {
    // canvas 10..50 at zoom 4 crosses pixels 2.5..12.5 -> box [2,13)
    expect(dragToBox(10, 6, 50, 40, 4, 64, 64)).toEqual(
      { x1: 2, y1: 1, x2: 13, y2: 10 },
    );
  });

  it("normalizes reversed drag corners", () => {
    expect(dragToBox(50, 40, 10, 6, 1, 64, 64)).toEqual(
      dragToBox(10, 6, 50, 40, 1, 64, 64),
    );
  });

  it("clamps to the image bounds", () => {
    expect(dragToBox(-20, -12, 900, 900, 4, 64, 64)).toEqual(
      { x1: 0, y1: 0, x2: 64, y2: 64 },
    );
  });

  it("rejects zero-area drags", () => {
    expect(dragToBox(12, 12, 12, 12, 1, 64, 64)).toBeNull();
    expect(dragToBox(12, 5, 12, 30, 1, 64, 64)).toBeNull(); // zero width
    expect(dragToBox(5, 12, 30, 12, 1, 64, 64)).toBeNull(); // zero height
  });

  it("rejects drags entirely outside the image", () => {
    expect(dragToBox(300, 300, 400, 400, 4, 64, 64)).toBeNull();
  });
});

describe("boxValid", () => {
  it("accepts boxes inside the image", () => {
    expect(boxValid({ x1: 0, y1: 0, x2: 64, y2: 64 }, 64, 64)).toBe(true);
    expect(boxValid({ x1: 5, y1: 3, x2: 6, y2: 4 }, 64, 64)).toBe(true);
  });

  it("rejects empty, inverted, out-of-range, or fractional boxes", () => {
    expect(boxValid({ x1: 5, y1: 3, x2: 5, y2: 4 }, 64, 64)).toBe(false);
    expect(boxValid({ x1: 9, y1: 3, x2: 5, y2: 4 }, 64, 64)).toBe(false);
    expect(boxValid({ x1: 0, y1: 0, x2: 65, y2: 4 }, 64, 64)).toBe(false);
    expect(boxValid({ x1: -1, y1: 0, x2: 5, y2: 4 }, 64, 64)).toBe(false);
    expect(boxValid({ x1: 0.5, y1: 0, x2: 5, y2: 4 }, 64, 64)).toBe(false);
  });
});

describe("toCanvasRect", () => {
  it("scales verbatim by the zoom factor", () => {
    expect(toCanvasRect({ x1: 3, y1: 4, x2: 10, y2: 12 }, 3)).toEqual(
      { left: 9, top: 12, width: 21, height: 24 },
    );
  });

  it("is the identity at zoom 1", () => {
    expect(toCanvasRect({ x1: 7, y1: 2, x2: 20, y2: 9 }, 1)).toEqual(
      { left: 7, top: 2, width: 13, height: 7 },
    );
  });
});

describe("overlayRect", () => {
  const row: ResultRow = {
    id: 3, distance: 1, path: "images/img_00003.png",
    window: [8, 4, 24, 20],
  };

  it("scales the server window verbatim in local view", () => {
    expect(overlayRect(row, "local", 2)).toEqual(
      { left: 16, top: 8, width: 32, height: 32 },
    );
  });

  it("hides overlays in global view", () => {
    expect(overlayRect(row, "global", 2)).toBeNull();
  });

  it("returns nothing for rows without a window", () => {
    expect(overlayRect({ id: 1, distance: 0, path: null }, "local", 2)).toBeNull();
  });
});
