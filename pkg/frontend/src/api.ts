/** HTTP client for the CLI's annotation export/serve endpoints. */

import { AnnotationEntry, IndexEntry } from "./types.js";

export async function fetchIndex(base: string): Promise<IndexEntry[]> {
  const res = await fetch(`${base}/api/index`);
  if (!res.ok) {
    throw new Error(`index fetch failed: ${res.status}`);
  }
  return (await res.json()) as IndexEntry[];
}

export async function fetchAnnotations(
  base: string,
): Promise<Record<string, AnnotationEntry>> {
  const res = await fetch(`${base}/api/annotations`);
  if (!res.ok) {
    throw new Error(`annotation fetch failed: ${res.status}`);
  }
  return (await res.json()) as Record<string, AnnotationEntry>;
}

export async function saveAnnotation(
  base: string,
  key: string,
  entry: AnnotationEntry,
): Promise<void> {
  const res = await fetch(`${base}/api/annotations/${key}`, {
    method: "PUT",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(entry),
  });
  if (!res.ok) {
    let detail = `${res.status}`;
    try {
      detail = `${res.status}: ${((await res.json()) as { error: string }).error}`;
    } catch {
      // body was not JSON; keep the status code
    }
    throw new Error(`save failed (${detail})`);
  }
}
