"""Deterministic desk-scale pick-and-place episode generator.

Stands in for a real capture rig: scripted minimum-jerk end-effector
trajectories over simple table layouts, rendered with a pinhole camera
rigidly offset from the EE, plus ground-truth first-frame boxes. The whole
emission is a pure function of (config, seed); per-episode RNG streams are
derived by hashing so parallel generation cannot change outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, PromptrajError
from .geometry import Pose, lerp, slerp
from .pipeline import (Box, GripperCalibration, RawEpisode, RAW_DIRNAME,
                       process_episode, write_array, write_ppm, write_processed)

SCENE_KINDS = ("structured", "cluttered", "random")


@dataclass
class WorldConfig:
    episodes_per_scene: int = 60
    image_width: int = 128
    image_height: int = 128
    n_objects: int = 5
    n_targets: int = 9
    table_x: tuple[float, float] = (-0.26, 0.26)
    table_y: tuple[float, float] = (-0.18, 0.18)
    clearance: float = 0.055
    frames_per_episode: int = 90
    fps: float = 30.0
    keyframe_jitter: float = 0.006
    width_max: float = 0.085
    object_radius: float = 0.016
    target_radius: float = 0.030
    max_ee_speed: float = 2.5  # m/s, sanity bound

    def save(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in sorted(vars(self).items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "WorldConfig":
        cfg = WorldConfig()
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if not hasattr(cfg, key):
                raise ContractError(f"unknown world config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple):
                parsed = tuple(float(v) for v in value.strip("() ").split(","))
            elif isinstance(current, int):
                parsed = int(value)
            else:
                parsed = float(value)
            setattr(cfg, key, parsed)
        return cfg


@dataclass
class Instance:
    position: np.ndarray   # 3-vector, z = 0 on the table
    category: str
    color: tuple[int, int, int]
    radius: float


@dataclass
class WorldLayout:
    scene: str
    objects: list[Instance]
    targets: list[Instance]
    table_x: tuple[float, float]
    table_y: tuple[float, float]


@dataclass
class ScriptedEpisode:
    scene: str
    task: str
    episode: str
    camera_poses: list[Pose]
    ee_poses: list[Pose]
    widths: np.ndarray
    frames: list[np.ndarray]
    object_box: Box
    target_box: Box
    object_id: int
    target_id: int


def _derived_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


_OBJECT_COLORS = [(70, 80, 170), (80, 70, 160), (90, 85, 175), (75, 95, 165), (85, 75, 180)]
_TARGET_SPECS = [("plate", (225, 220, 210)), ("bowl", (205, 130, 60)), ("cup", (60, 140, 200))]


def gen_layout(scene_kind: str, seed: int, config: WorldConfig | None = None) -> WorldLayout:
    """Deterministic layout for one scene: grid, jittered clutter, or random."""
    if scene_kind not in SCENE_KINDS:
        raise ContractError(f"unknown scene kind {scene_kind!r}")
    cfg = config or WorldConfig()
    rng = _derived_rng(seed, "layout", scene_kind)
    x0, x1 = cfg.table_x
    y0, y1 = cfg.table_y
    margin = cfg.target_radius + 0.01
    n = cfg.n_objects + cfg.n_targets
    n_distractors = 4 if scene_kind == "cluttered" else 0

    def grid_positions(count):
        cols = int(np.ceil(np.sqrt(count * (x1 - x0) / (y1 - y0))))
        rows = int(np.ceil(count / cols))
        xs = np.linspace(x0 + margin, x1 - margin, cols)
        ys = np.linspace(y0 + margin, y1 - margin, rows)
        pts = [np.array([x, y, 0.0]) for y in ys for x in xs]
        return pts[:count]

    if scene_kind == "structured":
        pts = grid_positions(n)
    elif scene_kind == "cluttered":
        base = grid_positions(n + n_distractors)
        for _ in range(1000):
            pts = [p + np.append(rng.uniform(-0.018, 0.018, 2), 0.0) for p in base]
            ok = all(np.linalg.norm(pts[i] - pts[j]) >= cfg.clearance
                     for i in range(len(pts)) for j in range(i + 1, len(pts)))
            if ok:
                break
        else:
            raise PromptrajError(f"{scene_kind}: could not satisfy clearance "
                                 f"{cfg.clearance} after bounded retries")
    else:
        # dart throwing: place points sequentially, retrying each against the
        # clearance constraint, with full restarts if a point gets stuck
        pts = []
        for _ in range(50):
            pts = []
            for _ in range(n):
                for _ in range(500):
                    cand = np.array([rng.uniform(x0 + margin, x1 - margin),
                                     rng.uniform(y0 + margin, y1 - margin), 0.0])
                    if all(np.linalg.norm(cand - p) >= cfg.clearance for p in pts):
                        pts.append(cand)
                        break
                else:
                    break
            if len(pts) == n:
                break
        if len(pts) != n:
            raise PromptrajError(f"random: could not satisfy clearance "
                                 f"{cfg.clearance} after bounded retries")

    objects = [Instance(pts[i], "object", _OBJECT_COLORS[i % len(_OBJECT_COLORS)],
                        cfg.object_radius) for i in range(cfg.n_objects)]
    targets = []
    for i in range(cfg.n_targets):
        cat, color = _TARGET_SPECS[i % len(_TARGET_SPECS)]
        targets.append(Instance(pts[cfg.n_objects + i], cat, color, cfg.target_radius))
    # cluttered distractors share target geometry but are never referenced
    for i in range(n_distractors):
        targets_idx = cfg.n_objects + cfg.n_targets + i
        targets.append(Instance(pts[targets_idx], "distractor", (120, 120, 120),
                                cfg.object_radius))
    return WorldLayout(scene=scene_kind, objects=objects,
                       targets=targets, table_x=cfg.table_x, table_y=cfg.table_y)


# --- scripted trajectories ----------------------------------------------------

_HOME_POSITION = np.array([0.0, -0.30, 0.45])
FOCAL_SCALE = 1.0  # focal length in units of image width
_EE_BASE_ROT = np.array([[1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0],
                         [0.0, 0.0, -1.0]])  # tool axis points down


def _look_rotation(eye: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Camera rotation whose +z looks from eye to center (x right, y down)."""
    fwd = center - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def _camera_offset() -> Pose:
    """Rigid EE-to-camera transform, fixed for the whole dataset."""
    home = Pose(_EE_BASE_ROT, _HOME_POSITION)
    cam_pos = _HOME_POSITION + np.array([0.0, 0.045, 0.06])
    cam = Pose(_look_rotation(cam_pos, np.array([0.0, 0.0, 0.0])), cam_pos)
    return home.inverse().compose(cam)


CAMERA_OFFSET = _camera_offset()


def minimum_jerk(u: np.ndarray) -> np.ndarray:
    """Quintic time profile with zero boundary velocity and acceleration."""
    return 10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5


def _yaw(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def gen_trajectory(layout: WorldLayout, object_id: int, target_id: int, seed,
                   config: WorldConfig | None = None
                   ) -> tuple[list[Pose], np.ndarray]:
    """Minimum-jerk EE trajectory home -> grasp -> place -> retreat.

    Returns one EE pose and gripper width per frame. The home keyframe is
    never jittered so frame 0 is identical across episodes of a layout.
    """
    cfg = config or WorldConfig()
    if not 0 <= object_id < len(layout.objects):
        raise ContractError(f"object id {object_id} not in layout")
    if not 0 <= target_id < len(layout.targets):
        raise ContractError(f"target id {target_id} not in layout")
    rng = _derived_rng(seed, "traj", layout.scene, object_id, target_id)
    obj = layout.objects[object_id].position
    tgt = layout.targets[target_id].position

    def jit():
        return np.append(rng.normal(0.0, cfg.keyframe_jitter, 2),
                         rng.normal(0.0, cfg.keyframe_jitter * 0.5))

    up = np.array([0.0, 0.0, 1.0])
    key_pos = [
        _HOME_POSITION,
        obj + 0.10 * up + jit(),          # pre-grasp
        obj + 0.018 * up + jit() * 0.3,   # grasp
        obj + 0.15 * up + jit(),          # lift
        tgt + 0.12 * up + jit(),          # pre-place
        tgt + 0.035 * up + jit() * 0.3,   # place
        tgt + 0.17 * up + jit(),          # retreat
    ]
    key_rot = [_EE_BASE_ROT @ _yaw(0.0)]
    for _ in range(6):
        key_rot.append(_EE_BASE_ROT @ _yaw(float(rng.normal(0.0, 0.25))))

    n_seg = len(key_pos) - 1
    n = cfg.frames_per_episode
    seg_of = np.minimum((np.arange(n) / n * n_seg).astype(int), n_seg - 1)
    local_u = np.arange(n) / n * n_seg - seg_of
    s = minimum_jerk(local_u)

    poses: list[Pose] = []
    for i in range(n):
        a, u = int(seg_of[i]), float(s[i])
        pos = key_pos[a] + u * (key_pos[a + 1] - key_pos[a])
        rot = slerp(key_rot[a], key_rot[a + 1], u)
        poses.append(Pose(rot, pos))

    # gripper: open, close over the grasp segment (1), open over place (4)
    open_w = cfg.width_max * 0.9
    closed_w = 0.012
    widths = np.empty(n)
    for i in range(n):
        a, u = int(seg_of[i]), float(s[i])
        if a < 1:
            widths[i] = open_w
        elif a == 1:
            widths[i] = open_w + u * (closed_w - open_w)
        elif a < 4:
            widths[i] = closed_w
        elif a == 4:
            widths[i] = closed_w + u * (open_w - closed_w)
        else:
            widths[i] = open_w
    return poses, widths


# --- rendering ------------------------------------------------------------------

def _project(points: np.ndarray, camera: Pose, width: int, height: int
             ) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection: pixel coords plus camera-frame depth."""
    f = FOCAL_SCALE * width
    cx, cy = width / 2.0, height / 2.0
    rel = (points - camera.position) @ camera.rotation
    z = rel[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * rel[:, 0] / z + cx
        v = f * rel[:, 1] / z + cy
    return np.stack([u, v], axis=1), z


def render_frame(layout: WorldLayout, camera: Pose, ee_position: np.ndarray,
                 width: int, height: int) -> np.ndarray:
    """Flat-shaded blob rasterization of the layout plus an EE marker."""
    img = np.full((height, width, 3), 40, dtype=np.uint8)
    f = FOCAL_SCALE * width

    def draw_disc(center, radius, color):
        uv, z = _project(center[None], camera, width, height)
        if z[0] <= 0.02:
            return
        r_px = f * radius / z[0]
        u, v = uv[0]
        x0 = max(int(np.floor(u - r_px)), 0)
        x1 = min(int(np.ceil(u + r_px)) + 1, width)
        y0 = max(int(np.floor(v - r_px)), 0)
        y1 = min(int(np.ceil(v + r_px)) + 1, height)
        if x0 >= x1 or y0 >= y1:
            return
        ys, xs = np.ogrid[y0:y1, x0:x1]
        mask = (xs - u) ** 2 + (ys - v) ** 2 <= r_px ** 2
        img[y0:y1, x0:x1][mask] = color

    for inst in layout.targets:
        draw_disc(inst.position, inst.radius, inst.color)
    for inst in layout.objects:
        draw_disc(inst.position, inst.radius, inst.color)
    draw_disc(ee_position, 0.012, (230, 230, 60))
    return img


def gt_boxes(layout: WorldLayout, camera: Pose, object_id: int, target_id: int,
             width: int, height: int) -> tuple[Box, Box, bool]:
    """Tight boxes around the projected blobs, clipped to the image.

    The final flag is False when either instance projects off-screen.
    """
    f = FOCAL_SCALE * width
    ok = True
    boxes = []
    for inst in (layout.objects[object_id], layout.targets[target_id]):
        uv, z = _project(inst.position[None], camera, width, height)
        if z[0] <= 0.02:
            ok = False
            boxes.append(Box(0, 0, 1, 1))
            continue
        r_px = f * inst.radius / z[0]
        u, v = uv[0]
        x0, x1 = np.clip([u - r_px, u + r_px], 0, width)
        y0, y1 = np.clip([v - r_px, v + r_px], 0, height)
        if x1 - x0 < 2 or y1 - y0 < 2:
            ok = False
        boxes.append(Box(float(np.floor(x0)), float(np.floor(y0)),
                         float(np.ceil(x1)), float(np.ceil(y1))))
    return boxes[0], boxes[1], ok


# --- episode scripting and emission ----------------------------------------------

def script_episode(layout: WorldLayout, object_id: int, target_id: int,
                   episode_name: str, seed, config: WorldConfig) -> ScriptedEpisode:
    ee_poses, widths = gen_trajectory(layout, object_id, target_id, seed, config)
    camera_poses = [p.compose(CAMERA_OFFSET) for p in ee_poses]
    frames = [render_frame(layout, c, p.position, config.image_width, config.image_height)
              for c, p in zip(camera_poses, ee_poses)]
    obj_box, tgt_box, ok = gt_boxes(layout, camera_poses[0], object_id, target_id,
                                    config.image_width, config.image_height)
    if not ok:
        raise PromptrajError(f"{episode_name}: prompt instance off-screen on frame 0")
    task = f"put_obj{object_id + 1}_to_tgt{target_id + 1}"
    return ScriptedEpisode(scene=layout.scene, task=task, episode=episode_name,
                           camera_poses=camera_poses, ee_poses=ee_poses,
                           widths=widths, frames=frames,
                           object_box=obj_box, target_box=tgt_box,
                           object_id=object_id, target_id=target_id)


GRIPPER_CAL = GripperCalibration(dist_min=20.0, dist_max=120.0,
                                 width_min=0.0, width_max=0.085)
CAMERA_LATENCY = 0.020
TRACKING_LATENCY = 0.010


def to_raw_episode(ep: ScriptedEpisode, config: WorldConfig) -> RawEpisode:
    """Package a scripted episode as a raw recording for the pipeline.

    Tracking covers a slightly wider window than the frames so latency
    correction never drops frames; widths are inverted through the tag
    calibration into synthetic detections.
    """
    n = len(ep.frames)
    fps = config.fps
    frame_times = np.arange(n) / fps
    track_times = np.linspace(-2.0 / fps, (n + 1) / fps, 2 * n)

    # analytic resampling of the camera trajectory onto tracking times
    def camera_at(t: float) -> Pose:
        x = np.clip(t * fps, 0.0, n - 1)
        i = int(np.floor(x))
        j = min(i + 1, n - 1)
        u = float(x - i)
        if i == j:
            return ep.camera_poses[i]
        a, b = ep.camera_poses[i], ep.camera_poses[j]
        return Pose(slerp(a.rotation, b.rotation, u), lerp(a.position, b.position, u))

    def width_at(t: float) -> float:
        x = np.clip(t * fps, 0.0, n - 1)
        i = int(np.floor(x))
        j = min(i + 1, n - 1)
        u = x - i
        return float((1 - u) * ep.widths[i] + u * ep.widths[j])

    track = [(float(t), camera_at(float(t))) for t in track_times]
    detections = []
    for t in track_times:
        w = width_at(float(t))
        span = GRIPPER_CAL.dist_max - GRIPPER_CAL.dist_min
        dist = GRIPPER_CAL.dist_min + (w - GRIPPER_CAL.width_min) / \
            (GRIPPER_CAL.width_max - GRIPPER_CAL.width_min) * span
        detections.append((float(t), np.array([0.0, 0.0]), np.array([dist, 0.0])))

    # raw timestamps are receive times: latency-corrected back to capture
    return RawEpisode(frame_times=frame_times - CAMERA_LATENCY,
                      track=[(t - TRACKING_LATENCY, p) for t, p in track],
                      tag_detections=[(t - TRACKING_LATENCY, l, r) for t, l, r in detections],
                      camera_latency=CAMERA_LATENCY,
                      tracking_latency=TRACKING_LATENCY,
                      cam_to_ee=CAMERA_OFFSET.inverse(),
                      gripper_cal=GRIPPER_CAL,
                      frames={i: f for i, f in enumerate(ep.frames)})


def raw_episode_dir(root, scene: str, task: str, episode: str) -> Path:
    return Path(root) / scene / task / RAW_DIRNAME / episode


def write_raw(root, ep: ScriptedEpisode, raw: RawEpisode) -> Path:
    out = raw_episode_dir(root, ep.scene, ep.task, ep.episode)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    write_array(out / "frame_times.arr", "frame_times", raw.frame_times)
    write_array(out / "track_times.arr", "track_times",
                np.array([t for t, _ in raw.track]))
    write_array(out / "track_poses.arr", "track_poses",
                np.stack([p.matrix() for _, p in raw.track]))
    det = np.array([[t, l[0], l[1], r[0], r[1]] for t, l, r in raw.tag_detections])
    write_array(out / "tag_detections.arr", "tag_detections", det)
    meta = {
        "camera_latency": raw.camera_latency,
        "tracking_latency": raw.tracking_latency,
        "cam_to_ee": raw.cam_to_ee.matrix().tolist(),
        "gripper_cal": {"dist_min": raw.gripper_cal.dist_min,
                        "dist_max": raw.gripper_cal.dist_max,
                        "width_min": raw.gripper_cal.width_min,
                        "width_max": raw.gripper_cal.width_max},
    }
    (out / "episode_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for i, frame in raw.frames.items():
        write_ppm(frames_dir / f"frame_{i}.ppm", frame)
    return out


def read_raw(path) -> RawEpisode:
    path = Path(path)
    meta = json.loads((path / "episode_meta.json").read_text())
    from .pipeline import read_array, read_ppm
    _, frame_times = read_array(path / "frame_times.arr")
    _, track_times = read_array(path / "track_times.arr")
    _, track_poses = read_array(path / "track_poses.arr")
    _, det = read_array(path / "tag_detections.arr")
    track = [(float(t), Pose.from_matrix(m)) for t, m in zip(track_times, track_poses)]
    detections = [(float(r[0]), np.array(r[1:3]), np.array(r[3:5])) for r in det]
    frames = {}
    for f in sorted((path / "frames").glob("frame_*.ppm")):
        frames[int(f.stem.split("_")[1])] = read_ppm(f)
    cal = GripperCalibration(**meta["gripper_cal"])
    return RawEpisode(frame_times=frame_times, track=track, tag_detections=detections,
                      camera_latency=meta["camera_latency"],
                      tracking_latency=meta["tracking_latency"],
                      cam_to_ee=Pose.from_matrix(np.asarray(meta["cam_to_ee"])),
                      gripper_cal=cal, frames=frames)


def emit_dataset(root, config: WorldConfig, seed: int,
                 write_raw_recordings: bool = True,
                 overwrite: bool = False) -> dict:
    """Emit the synthetic benchmark: processed episodes + annotation JSON.

    Returns the generation manifest (also written to gen_manifest.json).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    annotations: dict[str, dict] = {}
    manifest: dict = {"seed": seed, "episodes": []}
    for kind in SCENE_KINDS:
        layout = gen_layout(kind, seed, config)
        per_task_counter: dict[str, int] = {}
        for e in range(config.episodes_per_scene):
            rng = _derived_rng(seed, "episode", kind, e)
            object_id = int(rng.integers(config.n_objects))
            target_id = int(rng.integers(config.n_targets))
            task = f"put_obj{object_id + 1}_to_tgt{target_id + 1}"
            idx = per_task_counter.get(task, 0)
            per_task_counter[task] = idx + 1
            episode_name = f"ep{idx:03d}"
            ep = script_episode(layout, object_id, target_id, episode_name,
                                seed=(seed, kind, e), config=config)
            raw = to_raw_episode(ep, config)
            if write_raw_recordings:
                write_raw(root, ep, raw)
            record = process_episode(raw, kind, task, episode_name)
            write_processed(root, record, frames=raw.frames, overwrite=overwrite)
            key = f"{kind}/{task}/{episode_name}"
            annotations[key] = {
                "boxes": [ep.object_box.as_list(), ep.target_box.as_list()],
                "object": ep.object_box.as_list(),
                "target": ep.target_box.as_list(),
            }
            manifest["episodes"].append({"key": key, "scene": kind, "task": task,
                                         "episode": episode_name,
                                         "rng": [seed, "episode", kind, e]})
    (root / "annotations_merged.json").write_text(
        json.dumps(annotations, indent=1, sort_keys=True))
    (root / "gen_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    config.save(root / "world_config.txt")
    return manifest
