/** Browser wiring: episode list, canvas rendering, pointer/zoom handling. */

import { fetchAnnotations, fetchIndex, saveAnnotation } from "./api.js";
import { AnnotationSession, loadIndex } from "./session.js";
import { AnnotationEntry } from "./types.js";
import { ViewTransform } from "./view.js";

const OBJECT_COLOR = "#e03131";
const TARGET_COLOR = "#2f9e44";

async function start(): Promise<void> {
  const listEl = document.getElementById("episodes") as HTMLUListElement;
  const canvas = document.getElementById("frame") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const saveBtn = document.getElementById("save") as HTMLButtonElement;
  const statusEl = document.getElementById("status") as HTMLSpanElement;

  const index = await fetchIndex("");
  let annotations: Record<string, AnnotationEntry> = await fetchAnnotations("");
  const session = new AnnotationSession(loadIndex(index));
  const view = new ViewTransform();
  let image: HTMLImageElement | null = null;
  let panning = false;

  function setStatus(text: string): void {
    statusEl.textContent = text;
  }

  function redraw(): void {
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!image) {
      return;
    }
    ctx.imageSmoothingEnabled = false;
    ctx.setTransform(view.zoom, 0, 0, view.zoom, view.panX, view.panY);
    ctx.drawImage(image, 0, 0);
    session.boxes.forEach((b, i) => {
      ctx.strokeStyle = i === 0 ? OBJECT_COLOR : TARGET_COLOR;
      ctx.lineWidth = 2 / view.zoom;
      ctx.strokeRect(b.xMin, b.yMin, b.xMax - b.xMin, b.yMax - b.yMin);
    });
    saveBtn.disabled = !(session.canSave() && session.dirty);
  }

  function renderList(): void {
    listEl.innerHTML = "";
    for (const e of session.episodes) {
      const li = document.createElement("li");
      li.textContent = `${e.key}${e.annotated ? " ✓" : ""}${
        e.disabled ? ` (${e.reason})` : ""
      }`;
      li.className = e.key === session.currentKey ? "selected" : "";
      if (!e.disabled) {
        li.onclick = () => openEpisode(e.key, e.frame_path);
      } else {
        li.classList.add("disabled");
      }
      listEl.appendChild(li);
    }
  }

  function openEpisode(key: string, framePath: string): void {
    const img = new Image();
    img.onload = () => {
      image = img;
      session.selectEpisode(key, annotations[key] ?? null);
      view.zoom = 1;
      view.panX = 0;
      view.panY = 0;
      setStatus(`${key} (${session.mode})`);
      renderList();
      redraw();
    };
    img.onerror = () => setStatus(`failed to load ${framePath}`);
    img.src = `/${framePath}`;
  }

  canvas.onmousedown = (ev) => {
    if (ev.button === 1 || ev.shiftKey) {
      panning = true;
      return;
    }
    const p = view.screenToImage({ x: ev.offsetX, y: ev.offsetY });
    if (!session.beginEdit(p.x, p.y)) {
      if (!session.beginDraw(p.x, p.y)) {
        setStatus("two boxes already drawn; delete one first");
      }
    }
    redraw();
  };

  canvas.onmousemove = (ev) => {
    if (panning) {
      view.panBy(ev.movementX, ev.movementY);
      redraw();
      return;
    }
    const p = view.screenToImage({ x: ev.offsetX, y: ev.offsetY });
    session.updatePointer(p.x, p.y);
    redraw();
  };

  canvas.onmouseup = () => {
    if (panning) {
      panning = false;
      return;
    }
    if (!session.endDraw()) {
      session.endEdit();
    }
    redraw();
  };

  canvas.onwheel = (ev) => {
    ev.preventDefault();
    view.zoomAt(ev.deltaY < 0 ? 2 : 0.5, { x: ev.offsetX, y: ev.offsetY });
    redraw();
  };

  window.onkeydown = (ev) => {
    if (ev.key === "Delete" || ev.key === "Backspace") {
      if (session.boxes.length > 0) {
        session.deleteBox(session.boxes.length - 1);
        redraw();
      }
    }
  };

  saveBtn.onclick = async () => {
    if (!session.canSave() || session.currentKey === null) {
      return;
    }
    try {
      const entry = session.toEntry();
      await saveAnnotation("", session.currentKey, entry);
      annotations = await fetchAnnotations("");
      session.markSaved();
      const listing = session.episodes.find((e) => e.key === session.currentKey);
      if (listing) {
        listing.annotated = true;
      }
      setStatus(`saved ${session.currentKey}`);
      renderList();
      redraw();
    } catch (err) {
      setStatus(String(err));
    }
  };

  renderList();
  setStatus("select an episode");
}

start().catch((err) => {
  const statusEl = document.getElementById("status");
  if (statusEl) {
    statusEl.textContent = String(err);
  }
});
