"""Annotations, sliding-window samples, normalization stats, and splits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, PromptrajError
from .geometry import Pose, relative_pose, waypoint_encode
from .pipeline import Box, EpisodeRecord, validate_episode

PROMPT_VARIANTS = ("bbox", "point", "none", "vision_bbox", "vision_bbox_and_bbox")

DEFAULT_K = 4
DEFAULT_H = 16
DEFAULT_STRIDE = 3

ANNOTATIONS_FILENAME = "annotations_merged.json"


# --- annotations -------------------------------------------------------------

@dataclass
class AnnotationRecord:
    key: str
    object_box: Box
    target_box: Box


def _box_from(value) -> Box:
    vals = [float(v) for v in value]
    if len(vals) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(vals)}")
    return Box(*vals)


def parse_annotations(text: str, image_size: tuple[int, int] | None = None
                      ) -> tuple[dict[str, AnnotationRecord], list[tuple[str, str]]]:
    """Parse the merged annotation JSON.

    Accepts both the ordered ``boxes`` list (object first, target second)
    and explicit ``object``/``target`` fields; explicit fields win. Bad
    entries are skipped and itemized in the returned error list.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise PromptrajError(f"annotations: malformed JSON: {e}")
    if not isinstance(payload, dict):
        raise PromptrajError("annotations: top level must be an object")

    records: dict[str, AnnotationRecord] = {}
    errors: list[tuple[str, str]] = []
    for key, entry in payload.items():
        if not isinstance(entry, dict):
            errors.append((key, "entry is not an object"))
            continue
        obj = tgt = None
        boxes = entry.get("boxes")
        if isinstance(boxes, list) and len(boxes) >= 2:
            try:
                obj, tgt = _box_from(boxes[0]), _box_from(boxes[1])
            except (ValueError, TypeError) as e:
                errors.append((key, f"bad boxes list: {e}"))
                continue
        try:
            if "object" in entry:
                obj = _box_from(entry["object"])
            if "target" in entry:
                tgt = _box_from(entry["target"])
        except (ValueError, TypeError) as e:
            errors.append((key, f"bad explicit box: {e}"))
            continue
        if obj is None or tgt is None:
            errors.append((key, "missing object or target box"))
            continue
        bad = False
        for label, box in (("object", obj), ("target", tgt)):
            if box.x_min >= box.x_max or box.y_min >= box.y_max:
                errors.append((key, f"{label} box has empty extent"))
                bad = True
            elif image_size is not None and not box.valid_in(*image_size):
                errors.append((key, f"{label} box out of image bounds"))
                bad = True
        if bad:
            continue
        records[key] = AnnotationRecord(key=key, object_box=obj, target_box=tgt)
    return records, errors


def parse_key(key: str) -> tuple[str, str, str]:
    """Split an episode key into (scene, task, episode), path-normalized."""
    parts = [p for p in key.replace("\\", "/").split("/") if p]
    if len(parts) != 3:
        raise ContractError(f"unparseable episode key: {key!r}")
    return parts[0], parts[1], parts[2]


# --- samples -----------------------------------------------------------------

@dataclass
class Sample:
    """One training item. Frames are read lazily through the episode record."""
    scene: str
    task: str
    episode: str
    timestep: int                    # subsampled step index of the anchor
    first_frame_index: int           # raw frame index of frame 0
    current_frame_index: int         # raw frame index at the anchor step
    anchor_pose: Pose
    action_history: np.ndarray       # (K, 10)
    future_actions: np.ndarray       # (H, 10)
    is_final_chunk: bool
    record: EpisodeRecord = field(repr=False)

    @property
    def key(self) -> str:
        return f"{self.scene}/{self.task}/{self.episode}"

    def first_frame(self) -> np.ndarray:
        return self.record.frame(self.first_frame_index)

    def current_frame(self) -> np.ndarray:
        return self.record.frame(self.current_frame_index)


def build_samples(record: EpisodeRecord, k: int = DEFAULT_K, h: int = DEFAULT_H,
                  stride: int = DEFAULT_STRIDE) -> list[Sample]:
    """Sliding-window samples over stride-subsampled valid frames.

    At subsampled step t, futures are waypoints of T_t^-1 T_{t+j} for
    j=1..H and history uses the K preceding steps relative to T_t. Steps
    without a full history or future window are excluded. Returns an empty
    list (with the validator's reasons ignored) when the episode is too
    short.
    """
    positions = np.arange(0, len(record.valid_indices), stride)
    v = len(positions)
    if v < k + h + 1:
        return []
    poses = [record.pose_interp[i] for i in positions]
    grips = np.asarray(record.gripper_widths)[positions]
    first_frame_index = int(record.valid_indices[0])
    last_t = v - 1 - h
    samples: list[Sample] = []
    for t in range(k, last_t + 1):
        anchor = poses[t]
        inv = anchor.inverse()
        history = np.stack([
            waypoint_encode(inv.compose(poses[t - k + j]), float(grips[t - k + j]))
            for j in range(k)]) if k else np.zeros((0, 10))
        future = np.stack([
            waypoint_encode(inv.compose(poses[t + 1 + j]), float(grips[t + 1 + j]))
            for j in range(h)])
        samples.append(Sample(
            scene=record.scene, task=record.task, episode=record.episode,
            timestep=t,
            first_frame_index=first_frame_index,
            current_frame_index=int(record.valid_indices[positions[t]]),
            anchor_pose=anchor,
            action_history=history,
            future_actions=future,
            is_final_chunk=(t == last_t),
            record=record))
    return samples


# --- prompts -----------------------------------------------------------------

def normalize_box(box: Box, image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    return np.array([box.x_min / w, box.y_min / h, box.x_max / w, box.y_max / h])


def prompt_payload(variant: str, annotation: AnnotationRecord | None,
                   image_size: tuple[int, int]) -> dict:
    """Prompt fields for one sample under the given variant.

    Returns {"coords": {"object":…, "target":…} | None, "render": bool}.
    Coordinates are normalized to [0, 1]; boxes are corner pairs, points
    are box centers.
    """
    if variant not in PROMPT_VARIANTS:
        raise ConfigError(f"unknown prompt variant {variant!r}; "
                          f"expected one of {PROMPT_VARIANTS}")
    render = variant in ("vision_bbox", "vision_bbox_and_bbox")
    if variant == "none" or variant == "vision_bbox":
        return {"coords": None, "render": render}
    if annotation is None:
        raise ContractError(f"variant {variant!r} requires an annotation")
    ob = normalize_box(annotation.object_box, image_size)
    tb = normalize_box(annotation.target_box, image_size)
    if variant == "point":
        coords = {"object": np.array([(ob[0] + ob[2]) / 2, (ob[1] + ob[3]) / 2]),
                  "target": np.array([(tb[0] + tb[2]) / 2, (tb[1] + tb[3]) / 2])}
        return {"coords": coords, "render": False}
    return {"coords": {"object": ob, "target": tb}, "render": render}


def render_prompt_boxes(image: np.ndarray, object_box: Box, target_box: Box) -> np.ndarray:
    """Composite 2-pixel box outlines: object red, target green."""
    out = image.copy()
    h, w = out.shape[:2]

    def draw(box: Box, color):
        x0 = int(np.clip(round(box.x_min), 0, w - 1))
        x1 = int(np.clip(round(box.x_max), 0, w - 1))
        y0 = int(np.clip(round(box.y_min), 0, h - 1))
        y1 = int(np.clip(round(box.y_max), 0, h - 1))
        t = 2
        out[y0:min(y0 + t, h), x0:x1 + 1] = color
        out[max(y1 - t + 1, 0):y1 + 1, x0:x1 + 1] = color
        out[y0:y1 + 1, x0:min(x0 + t, w)] = color
        out[y0:y1 + 1, max(x1 - t + 1, 0):x1 + 1] = color

    draw(object_box, (255, 0, 0))
    draw(target_box, (0, 255, 0))
    return out


# --- normalization -----------------------------------------------------------

STD_FLOOR = 1e-4


@dataclass
class NormStats:
    mean: np.ndarray   # (10,)
    std: np.ndarray    # (10,), each component >= STD_FLOOR

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(np.asarray(d["mean"], dtype=np.float64),
                         np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(samples) -> NormStats:
    """Per-dimension mean and population std over all future waypoints.

    Accepts a list of samples or an already-stacked (..., 10) array.
    """
    if isinstance(samples, np.ndarray):
        if samples.size == 0:
            raise ContractError("compute_norm_stats: empty sample set")
        stacked = samples.reshape(-1, samples.shape[-1])
    else:
        if not samples:
            raise ContractError("compute_norm_stats: empty sample set")
        stacked = np.concatenate([s.future_actions for s in samples], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std)


# --- splits ------------------------------------------------------------------

@dataclass
class SplitManifest:
    seed: int
    val_ratio: float
    train: list[dict]   # {key, scene, task, path}
    val: list[dict]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "val_ratio": self.val_ratio,
                "train": self.train, "val": self.val}

    @staticmethod
    def from_dict(d: dict) -> "SplitManifest":
        return SplitManifest(seed=int(d["seed"]), val_ratio=float(d["val_ratio"]),
                             train=list(d["train"]), val=list(d["val"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @staticmethod
    def load(path) -> "SplitManifest":
        return SplitManifest.from_dict(json.loads(Path(path).read_text()))


def _scene_rng(seed: int, scene: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}/{scene}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def make_split(episodes: list[dict], val_ratio: float, seed: int) -> SplitManifest:
    """Scene-aware, task-level split.

    ``episodes`` entries carry key/scene/task/path. Per scene, task names
    are shuffled with a (seed, scene)-derived generator and whole tasks go
    to validation until that scene's validation episode fraction first
    reaches val_ratio. All episodes of a validation task land in
    validation, so no task straddles the split.
    """
    if not 0.0 < val_ratio < 1.0:
        raise ConfigError(f"val_ratio must be in (0, 1), got {val_ratio}")
    by_scene: dict[str, dict[str, list[dict]]] = {}
    for ep in episodes:
        by_scene.setdefault(ep["scene"], {}).setdefault(ep["task"], []).append(ep)

    train: list[dict] = []
    val: list[dict] = []
    for scene in sorted(by_scene):
        tasks = by_scene[scene]
        names = sorted(tasks)
        rng = _scene_rng(seed, scene)
        rng.shuffle(names)
        total = sum(len(tasks[t]) for t in names)
        val_tasks: set[str] = set()
        acc = 0
        for t in names:
            if acc / total >= val_ratio:
                break
            val_tasks.add(t)
            acc += len(tasks[t])
        for t in names:
            bucket = val if t in val_tasks else train
            for ep in sorted(tasks[t], key=lambda e: e["key"]):
                bucket.append(dict(ep))

    train_keys = {e["key"] for e in train}
    val_keys = {e["key"] for e in val}
    overlap = train_keys & val_keys
    if overlap:
        raise PromptrajError(f"split produced overlapping keys: {sorted(overlap)[:5]}")
    return SplitManifest(seed=seed, val_ratio=val_ratio, train=train, val=val)


def split_tv_distance(manifest: SplitManifest) -> float:
    """Total variation between the two splits' scene distributions."""
    scenes = sorted({e["scene"] for e in manifest.train + manifest.val})

    def dist(entries):
        counts = np.array([sum(1 for e in entries if e["scene"] == s) for s in scenes],
                          dtype=np.float64)
        total = counts.sum()
        return counts / total if total else counts

    p, q = dist(manifest.train), dist(manifest.val)
    return 0.5 * float(np.abs(p - q).sum())


# --- statistics sidecars -------------------------------------------------------

def write_dataset_stats(out_dir, records: list[EpisodeRecord],
                        samples_by_key: dict[str, list[Sample]],
                        manifest: SplitManifest,
                        annotations: dict[str, AnnotationRecord],
                        k: int = DEFAULT_K, h: int = DEFAULT_H) -> None:
    """Emit summary.json plus the CSV sidecars next to the split manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    all_samples = [s for ss in samples_by_key.values() for s in ss]
    n_eps = len(records)
    disp = np.array([np.linalg.norm(s.future_actions[-1, :3]) for s in all_samples]) \
        if all_samples else np.zeros(0)
    summary = {
        "episodes": n_eps,
        "samples": len(all_samples),
        "train_episodes": len(manifest.train),
        "val_episodes": len(manifest.val),
        "mean_episode_steps": float(np.mean([len(r.valid_indices) for r in records])) if records else 0.0,
        "mean_samples_per_episode": (len(all_samples) / n_eps) if n_eps else 0.0,
        "mean_final_displacement": float(disp.mean()) if disp.size else 0.0,
        "split_tv_distance": split_tv_distance(manifest),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

    with open(out / "episode_stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "scene", "task", "episode", "valid_frames", "samples"])
        for r in sorted(records, key=lambda r: r.key):
            w.writerow([r.key, r.scene, r.task, r.episode,
                        len(r.valid_indices), len(samples_by_key.get(r.key, []))])

    counts: dict[tuple[str, str], int] = {}
    for r in records:
        counts[(r.scene, r.task)] = counts.get((r.scene, r.task), 0) + 1
    with open(out / "count_stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "task", "episodes"])
        for (scene, task), n in sorted(counts.items()):
            w.writerow([scene, task, n])

    with open(out / "prompt_stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "object_w", "object_h", "object_cx", "object_cy",
                    "target_w", "target_h", "target_cx", "target_cy"])
        for key in sorted(annotations):
            a = annotations[key]
            row = [key]
            for b in (a.object_box, a.target_box):
                row += [b.x_max - b.x_min, b.y_max - b.y_min,
                        (b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2]
            w.writerow(row)

    split_keys = {"train": {e["key"] for e in manifest.train},
                  "val": {e["key"] for e in manifest.val}}
    for split in ("train", "val"):
        rows = [(float(np.linalg.norm(s.future_actions[-1, :3])), s.key, s.timestep)
                for s in all_samples if s.key in split_keys[split]]
        rows.sort(reverse=True)
        with open(out / f"outliers_{split}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["final_displacement", "key", "timestep"])
            for d, key, t in rows[:20]:
                w.writerow([f"{d:.9f}", key, t])
