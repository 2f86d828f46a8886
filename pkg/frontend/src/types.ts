/** Shared data shapes matching the CLI's export and annotation formats. */

/** One row of the episode index emitted by the export command. */
export interface IndexEntry {
  key: string;
  frame_path: string;
  image_width: number;
  image_height: number;
  annotated: boolean;
}

/** Index entry decorated with availability for the episode list. */
export interface EpisodeListing extends IndexEntry {
  disabled: boolean;
  reason: string | null;
}

/** Axis-aligned box in original image pixel coordinates. */
export interface Box {
  xMin: number;
  yMin: number;
  xMax: number;
  yMax: number;
}

/** One episode's entry in the merged annotation JSON. */
export interface AnnotationEntry {
  boxes: number[][];
  object: number[];
  target: number[];
}

export function boxToArray(b: Box): number[] {
  return [b.xMin, b.yMin, b.xMax, b.yMax];
}

export function boxFromArray(a: number[]): Box {
  if (a.length !== 4) {
    throw new Error(`box needs 4 coordinates, got ${a.length}`);
  }
  return { xMin: a[0], yMin: a[1], xMax: a[2], yMax: a[3] };
}
