import { beforeEach, describe, expect, it } from "vitest";

import { AnnotationSession, loadIndex } from "../src/session.js";
import { IndexEntry } from "../src/types.js";
import { ViewTransform } from "../src/view.js";

const INDEX: IndexEntry[] = [
  {
    key: "structured/put_obj1_to_tgt2/ep000",
    frame_path: "structured/put_obj1_to_tgt2/ep000.png",
    image_width: 128,
    image_height: 128,
    annotated: false,
  },
  {
    key: "cluttered/put_obj3_to_tgt4/ep001",
    frame_path: "cluttered/put_obj3_to_tgt4/ep001.png",
    image_width: 128,
    image_height: 128,
    annotated: true,
  },
];

function freshSession(): AnnotationSession {
  const s = new AnnotationSession(loadIndex(INDEX));
  s.selectEpisode(INDEX[0].key);
  return s;
}

function drawBox(
  s: AnnotationSession,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
): boolean {
  s.beginDraw(x0, y0);
  s.updatePointer(x1, y1);
  return s.endDraw();
}

describe("loadIndex", () => {
  it("returns an empty list for an empty index", () => {
    expect(loadIndex([])).toEqual([]);
  });

  it("lists every entry with its annotation status", () => {
    const listing = loadIndex(INDEX);
    expect(listing).toHaveLength(2);
    expect(listing[0].annotated).toBe(false);
    expect(listing[1].annotated).toBe(true);
    expect(listing.every((e) => !e.disabled)).toBe(true);
  });

  it("disables episodes whose frame file is missing, with a reason", () => {
    const listing = loadIndex(INDEX, (p) => !p.startsWith("cluttered"));
    expect(listing[0].disabled).toBe(false);
    expect(listing[1].disabled).toBe(true);
    expect(listing[1].reason).toContain("missing frame file");
  });
});

describe("AnnotationSession drawing", () => {
  let s: AnnotationSession;
  beforeEach(() => {
    s = freshSession();
  });

  it("read-back coordinates equal the drawn pixels", () => {
    expect(drawBox(s, 10, 20, 34, 48)).toBe(true);
    expect(s.boxes[0]).toEqual({ xMin: 10, yMin: 20, xMax: 34, yMax: 48 });
    expect(s.dirty).toBe(true);
  });

  it("normalizes reversed drags", () => {
    drawBox(s, 60, 70, 40, 30);
    expect(s.boxes[0]).toEqual({ xMin: 40, yMin: 30, xMax: 60, yMax: 70 });
  });

  it("clamps to image bounds", () => {
    drawBox(s, -15, -3, 500, 40);
    expect(s.boxes[0]).toEqual({ xMin: 0, yMin: 0, xMax: 128, yMax: 40 });
  });

  it("rejects degenerate boxes under 2 px per side", () => {
    expect(drawBox(s, 10, 10, 11, 40)).toBe(false);
    expect(drawBox(s, 10, 10, 40, 11)).toBe(false);
    expect(s.boxes).toHaveLength(0);
    expect(drawBox(s, 10, 10, 12, 12)).toBe(true);
  });

  it("blocks a third box", () => {
    drawBox(s, 1, 1, 10, 10);
    drawBox(s, 20, 20, 30, 30);
    expect(s.beginDraw(50, 50)).toBe(false);
    expect(s.boxes).toHaveLength(2);
  });

  it("maps drawn pixels back exactly through 2x zoom", () => {
    const view = new ViewTransform(2, 9, -4);
    const start = view.imageToScreen({ x: 17, y: 23 });
    const end = view.imageToScreen({ x: 91, y: 77 });
    const p0 = view.screenToImage(start);
    const p1 = view.screenToImage(end);
    drawBox(s, p0.x, p0.y, p1.x, p1.y);
    expect(s.boxes[0]).toEqual({ xMin: 17, yMin: 23, xMax: 91, yMax: 77 });
  });
});

describe("AnnotationSession editing", () => {
  let s: AnnotationSession;
  beforeEach(() => {
    s = freshSession();
    drawBox(s, 20, 20, 60, 50);
  });

  it("moves a box by dragging its interior", () => {
    expect(s.beginEdit(40, 35)).toBe(true);
    s.updatePointer(45, 30);
    s.endEdit();
    expect(s.boxes[0]).toEqual({ xMin: 25, yMin: 15, xMax: 65, yMax: 45 });
  });

  it("clamps moves at the image edge without squashing", () => {
    s.beginEdit(40, 35);
    s.updatePointer(-200, 35);
    s.endEdit();
    expect(s.boxes[0]).toEqual({ xMin: 0, yMin: 20, xMax: 40, yMax: 50 });
  });

  it("resizes by a corner handle", () => {
    expect(s.beginEdit(60, 50)).toBe(true); // se corner
    s.updatePointer(70, 64);
    s.endEdit();
    expect(s.boxes[0]).toEqual({ xMin: 20, yMin: 20, xMax: 70, yMax: 64 });
  });

  it("removes a box squeezed under the minimum size", () => {
    s.beginEdit(60, 50); // se corner
    s.updatePointer(21, 21);
    s.endEdit();
    expect(s.boxes).toHaveLength(0);
  });

  it("deletes boxes explicitly", () => {
    s.deleteBox(0);
    expect(s.boxes).toHaveLength(0);
    expect(() => s.deleteBox(0)).toThrow();
  });

  it("misses when clicking outside all boxes", () => {
    expect(s.beginEdit(100, 100)).toBe(false);
  });
});

describe("AnnotationSession saving", () => {
  let s: AnnotationSession;
  beforeEach(() => {
    s = freshSession();
  });

  it("only allows saving with exactly two boxes", () => {
    expect(s.canSave()).toBe(false);
    drawBox(s, 1, 1, 10, 10);
    expect(s.canSave()).toBe(false);
    drawBox(s, 20, 20, 30, 30);
    expect(s.canSave()).toBe(true);
    expect(() => {
      s.deleteBox(1);
      s.toEntry();
    }).toThrow();
  });

  it("orders the entry object first, target second", () => {
    drawBox(s, 1, 2, 11, 12);
    drawBox(s, 20, 21, 40, 41);
    const entry = s.toEntry();
    expect(entry.object).toEqual([1, 2, 11, 12]);
    expect(entry.target).toEqual([20, 21, 40, 41]);
    expect(entry.boxes).toEqual([entry.object, entry.target]);
  });

  it("loads existing annotations in modify mode", () => {
    s.selectEpisode(INDEX[1].key, {
      boxes: [
        [5, 6, 15, 16],
        [50, 51, 70, 71],
      ],
      object: [5, 6, 15, 16],
      target: [50, 51, 70, 71],
    });
    expect(s.mode).toBe("modify");
    expect(s.boxes).toEqual([
      { xMin: 5, yMin: 6, xMax: 15, yMax: 16 },
      { xMin: 50, yMin: 51, xMax: 70, yMax: 71 },
    ]);
    expect(s.dirty).toBe(false);
    expect(s.canSave()).toBe(true);
  });

  it("rejects selecting a disabled episode", () => {
    const blocked = new AnnotationSession(loadIndex(INDEX, () => false));
    expect(() => blocked.selectEpisode(INDEX[0].key)).toThrow(/unavailable/);
  });

  it("marks saved sessions clean and switches to modify mode", () => {
    drawBox(s, 1, 1, 10, 10);
    drawBox(s, 20, 20, 30, 30);
    s.markSaved();
    expect(s.dirty).toBe(false);
    expect(s.mode).toBe("modify");
  });
});
