/** Annotation editing state: draft boxes for one episode's first frame.
 *
 * Boxes are held in original image pixel coordinates, ordered object
 * first, target second. All interactions receive image coordinates (the
 * view transform maps pointer events before they reach the session).
 */

import {
  AnnotationEntry,
  Box,
  EpisodeListing,
  IndexEntry,
  boxFromArray,
  boxToArray,
} from "./types.js";

export const MIN_SIDE_PX = 2;
export const HANDLE_RADIUS_PX = 6;

export type Mode = "create" | "modify";
export type Handle = "nw" | "ne" | "sw" | "se" | "move";

interface DrawState {
  kind: "draw";
  startX: number;
  startY: number;
  box: Box;
}

interface EditState {
  kind: "edit";
  index: number;
  handle: Handle;
  lastX: number;
  lastY: number;
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

function normalized(b: Box): Box {
  return {
    xMin: Math.min(b.xMin, b.xMax),
    yMin: Math.min(b.yMin, b.yMax),
    xMax: Math.max(b.xMin, b.xMax),
    yMax: Math.max(b.yMin, b.yMax),
  };
}

/** Parse the exported index; episodes without a frame are listed disabled. */
export function loadIndex(
  entries: IndexEntry[],
  frameAvailable: (path: string) => boolean = () => true,
): EpisodeListing[] {
  return entries.map((e) => {
    const ok = frameAvailable(e.frame_path);
    return {
      ...e,
      disabled: !ok,
      reason: ok ? null : `missing frame file: ${e.frame_path}`,
    };
  });
}

export class AnnotationSession {
  readonly episodes: EpisodeListing[];
  currentKey: string | null = null;
  mode: Mode = "create";
  boxes: Box[] = [];
  dirty = false;
  imageWidth = 0;
  imageHeight = 0;
  private pointer: DrawState | EditState | null = null;

  constructor(episodes: EpisodeListing[]) {
    this.episodes = episodes;
  }

  /** Open an episode; existing boxes put the session in modify mode. */
  selectEpisode(key: string, existing: AnnotationEntry | null = null): void {
    const entry = this.episodes.find((e) => e.key === key);
    if (!entry) {
      throw new Error(`unknown episode key: ${key}`);
    }
    if (entry.disabled) {
      throw new Error(`episode unavailable: ${entry.reason}`);
    }
    this.currentKey = key;
    this.imageWidth = entry.image_width;
    this.imageHeight = entry.image_height;
    this.pointer = null;
    this.dirty = false;
    if (existing) {
      this.mode = "modify";
      this.boxes = [boxFromArray(existing.object), boxFromArray(existing.target)];
    } else {
      this.mode = "create";
      this.boxes = [];
    }
  }

  private clampX(x: number): number {
    return clamp(Math.round(x), 0, this.imageWidth);
  }

  private clampY(y: number): number {
    return clamp(Math.round(y), 0, this.imageHeight);
  }

  /** Start drawing a new box; blocked when two boxes already exist. */
  beginDraw(x: number, y: number): boolean {
    if (this.currentKey === null || this.boxes.length >= 2) {
      return false;
    }
    const px = this.clampX(x);
    const py = this.clampY(y);
    this.pointer = {
      kind: "draw",
      startX: px,
      startY: py,
      box: { xMin: px, yMin: py, xMax: px, yMax: py },
    };
    return true;
  }

  updatePointer(x: number, y: number): void {
    const p = this.pointer;
    if (!p) {
      return;
    }
    if (p.kind === "draw") {
      p.box = normalized({
        xMin: p.startX,
        yMin: p.startY,
        xMax: this.clampX(x),
        yMax: this.clampY(y),
      });
      return;
    }
    const dx = this.clampX(x) - p.lastX;
    const dy = this.clampY(y) - p.lastY;
    p.lastX = this.clampX(x);
    p.lastY = this.clampY(y);
    const b = this.boxes[p.index];
    if (p.handle === "move") {
      const w = b.xMax - b.xMin;
      const h = b.yMax - b.yMin;
      const xMin = clamp(b.xMin + dx, 0, this.imageWidth - w);
      const yMin = clamp(b.yMin + dy, 0, this.imageHeight - h);
      this.boxes[p.index] = { xMin, yMin, xMax: xMin + w, yMax: yMin + h };
      return;
    }
    const next = { ...b };
    if (p.handle.includes("w")) {
      next.xMin = this.clampX(next.xMin + dx);
    } else {
      next.xMax = this.clampX(next.xMax + dx);
    }
    if (p.handle.includes("n")) {
      next.yMin = this.clampY(next.yMin + dy);
    } else {
      next.yMax = this.clampY(next.yMax + dy);
    }
    this.boxes[p.index] = normalized(next);
  }

  /** Finish drawing; boxes with a side under 2 px are discarded. */
  endDraw(): boolean {
    const p = this.pointer;
    if (!p || p.kind !== "draw") {
      return false;
    }
    this.pointer = null;
    const b = p.box;
    if (b.xMax - b.xMin < MIN_SIDE_PX || b.yMax - b.yMin < MIN_SIDE_PX) {
      return false;
    }
    this.boxes.push(b);
    this.dirty = true;
    return true;
  }

  /** The box handle under an image-coordinate point, if any. */
  hitTest(x: number, y: number): { index: number; handle: Handle } | null {
    for (let i = this.boxes.length - 1; i >= 0; i--) {
      const b = this.boxes[i];
      const corners: [Handle, number, number][] = [
        ["nw", b.xMin, b.yMin],
        ["ne", b.xMax, b.yMin],
        ["sw", b.xMin, b.yMax],
        ["se", b.xMax, b.yMax],
      ];
      for (const [handle, cx, cy] of corners) {
        if (Math.abs(x - cx) <= HANDLE_RADIUS_PX && Math.abs(y - cy) <= HANDLE_RADIUS_PX) {
          return { index: i, handle };
        }
      }
      if (x >= b.xMin && x <= b.xMax && y >= b.yMin && y <= b.yMax) {
        return { index: i, handle: "move" };
      }
    }
    return null;
  }

  beginEdit(x: number, y: number): boolean {
    const hit = this.hitTest(x, y);
    if (!hit) {
      return false;
    }
    this.pointer = {
      kind: "edit",
      index: hit.index,
      handle: hit.handle,
      lastX: this.clampX(x),
      lastY: this.clampY(y),
    };
    return true;
  }

  /** Finish an edit; a box squeezed under 2 px per side is removed. */
  endEdit(): boolean {
    const p = this.pointer;
    if (!p || p.kind !== "edit") {
      return false;
    }
    this.pointer = null;
    const b = this.boxes[p.index];
    if (b.xMax - b.xMin < MIN_SIDE_PX || b.yMax - b.yMin < MIN_SIDE_PX) {
      this.boxes.splice(p.index, 1);
    }
    this.dirty = true;
    return true;
  }

  deleteBox(index: number): void {
    if (index < 0 || index >= this.boxes.length) {
      throw new Error(`no box at index ${index}`);
    }
    this.boxes.splice(index, 1);
    this.dirty = true;
  }

  /** Save is allowed only with exactly two valid boxes. */
  canSave(): boolean {
    return (
      this.currentKey !== null &&
      this.boxes.length === 2 &&
      this.boxes.every(
        (b) => b.xMax - b.xMin >= MIN_SIDE_PX && b.yMax - b.yMin >= MIN_SIDE_PX,
      )
    );
  }

  /** The save payload: ordered boxes plus explicit object/target fields. */
  toEntry(): AnnotationEntry {
    if (!this.canSave()) {
      throw new Error("cannot save: need exactly two valid boxes");
    }
    const object = boxToArray(this.boxes[0]);
    const target = boxToArray(this.boxes[1]);
    return { boxes: [object, target], object, target };
  }

  markSaved(): void {
    this.dirty = false;
    this.mode = "modify";
  }
}
