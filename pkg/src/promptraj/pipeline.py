"""Raw episode recordings -> processed episode layout.

Processed layout per episode:
    <root>/<scene>/<task>/recording_output_processed/<episode>/
        frames/frame_<index>.ppm
        valid_indices.arr   (i64)
        pose_interp.arr     (N x 4 x 4, row-major f64)
        gripper_widths.arr  (N, f64)

Array files: magic "SPVT", u32 name length, name, u32 rank, u64 extents,
then little-endian payload (f64, or i64 for valid_indices).
"""

from __future__ import annotations

import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, PipelineError
from .geometry import Pose, lerp, slerp

ARRAY_MAGIC = b"SPVT"
PROCESSED_DIRNAME = "recording_output_processed"
RAW_DIRNAME = "recording_output_raw"


# --- array / raster file formats -------------------------------------------

def write_array(path, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.int64:
        payload = np.ascontiguousarray(arr, dtype="<i8")
    else:
        payload = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(struct.pack("<I", len(name_b)))
        f.write(name_b)
        f.write(struct.pack("<I", arr.ndim))
        for n in arr.shape:
            f.write(struct.pack("<Q", n))
        f.write(payload.tobytes())


def read_array(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != ARRAY_MAGIC:
            raise PipelineError(f"{path}: bad array magic")
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        dtype = "<i8" if name == "valid_indices" else "<f8"
        data = np.frombuffer(f.read(8 * count), dtype=dtype).reshape(shape)
    return name, np.array(data)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 raster; image is (H, W, 3) uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ContractError(f"write_ppm: expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise PipelineError(f"{path}: not a binary PPM")
    # header: three whitespace-separated fields after the magic
    fields, pos = [], 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise PipelineError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(blob, dtype=np.uint8, offset=pos, count=w * h * 3).reshape(h, w, 3).copy()


# --- domain types -----------------------------------------------------------

@dataclass
class GripperCalibration:
    """Linear map between inter-tag pixel distance and width in meters."""
    dist_min: float
    dist_max: float
    width_min: float
    width_max: float

    def __post_init__(self):
        if not self.dist_max > self.dist_min:
            raise ContractError("gripper calibration needs dist_max > dist_min")

    def width_of(self, dist: float) -> float:
        u = (dist - self.dist_min) / (self.dist_max - self.dist_min)
        w = self.width_min + u * (self.width_max - self.width_min)
        return float(np.clip(w, min(self.width_min, self.width_max),
                             max(self.width_min, self.width_max)))


@dataclass
class RawEpisode:
    frame_times: np.ndarray                    # seconds, strictly increasing
    track: list[tuple[float, Pose]]            # (time, camera pose)
    tag_detections: list[tuple[float, np.ndarray, np.ndarray]]  # (t, left px, right px)
    camera_latency: float
    tracking_latency: float
    cam_to_ee: Pose
    gripper_cal: GripperCalibration
    frames: dict[int, np.ndarray] = field(default_factory=dict)  # index -> raster

    def __post_init__(self):
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if np.any(np.diff(self.frame_times) <= 0):
            raise ContractError("frame times must be strictly increasing")
        if len(self.track) < 2:
            raise ContractError("need at least 2 tracking samples")
        tt = [t for t, _ in self.track]
        if np.any(np.diff(tt) <= 0):
            raise ContractError("tracking times must be strictly increasing")
        if not (np.isfinite(self.camera_latency) and np.isfinite(self.tracking_latency)):
            raise ContractError("latencies must be finite")


@dataclass
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def valid_in(self, width: int, height: int) -> bool:
        return (self.x_min < self.x_max and self.y_min < self.y_max
                and self.x_min >= 0 and self.y_min >= 0
                and self.x_max <= width and self.y_max <= height)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class EpisodeRecord:
    scene: str
    task: str
    episode: str
    valid_indices: np.ndarray          # i64, sorted, unique
    pose_interp: list[Pose]            # EE pose per valid frame
    gripper_widths: np.ndarray         # meters per valid frame
    frames_dir: Path | None = None     # raster store (lazy)
    prompt_object: Box | None = None
    prompt_target: Box | None = None

    @property
    def key(self) -> str:
        return f"{self.scene}/{self.task}/{self.episode}"

    def frame(self, index: int) -> np.ndarray:
        if self.frames_dir is None:
            raise PipelineError(f"{self.key}: no frame store attached")
        return read_ppm(Path(self.frames_dir) / f"frame_{index}.ppm")


# --- pipeline operations -----------------------------------------------------

def synchronize(raw: RawEpisode) -> tuple[np.ndarray, np.ndarray]:
    """Latency-correct both streams and keep frames inside the overlap.

    Returns (valid frame indices, corrected frame times for those indices).
    The overlap interval is closed: boundary frames are included.
    """
    cam_times = raw.frame_times + raw.camera_latency
    track_times = np.array([t for t, _ in raw.track]) + raw.tracking_latency
    lo = max(cam_times[0], track_times[0])
    hi = min(cam_times[-1], track_times[-1])
    if lo > hi:
        raise PipelineError("no temporal overlap between camera and tracking streams")
    mask = (cam_times >= lo) & (cam_times <= hi)
    idx = np.nonzero(mask)[0].astype(np.int64)
    if idx.size == 0:
        raise PipelineError("no temporal overlap between camera and tracking streams")
    return idx, cam_times[idx]


def interpolate_poses(track: list[tuple[float, Pose]], query_times: np.ndarray) -> list[Pose]:
    """Lerp translations and slerp rotations between bracketing samples."""
    times = np.array([t for t, _ in track], dtype=np.float64)
    poses = [p for _, p in track]
    out: list[Pose] = []
    for q in np.asarray(query_times, dtype=np.float64):
        if q < times[0] or q > times[-1]:
            raise PipelineError(f"query time {q} outside tracked range "
                                f"[{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, q, side="right"))
        if j >= len(times):
            out.append(poses[-1])
            continue
        if times[j - 1] == q:
            out.append(poses[j - 1])
            continue
        i = j - 1
        u = (q - times[i]) / (times[j] - times[i])
        out.append(Pose(slerp(poses[i].rotation, poses[j].rotation, float(u)),
                        lerp(poses[i].position, poses[j].position, float(u))))
    return out


def camera_to_ee(camera_pose: Pose, extrinsic: Pose) -> Pose:
    return camera_pose.compose(extrinsic)


def gripper_widths(detections: list[tuple[float, np.ndarray, np.ndarray]],
                   cal: GripperCalibration,
                   query_times: np.ndarray) -> np.ndarray:
    """Calibrated widths from tag detections, interpolated to query times.

    Detections outside the query range still anchor the interpolation;
    queries beyond the detection range clamp to the nearest detection.
    """
    if not detections:
        raise PipelineError("no gripper tag detections available")
    det_t = np.array([t for t, _, _ in detections], dtype=np.float64)
    det_w = np.array([cal.width_of(float(np.linalg.norm(np.asarray(l, dtype=np.float64)
                                                        - np.asarray(r, dtype=np.float64))))
                      for _, l, r in detections])
    order = np.argsort(det_t)
    return np.interp(np.asarray(query_times, dtype=np.float64), det_t[order], det_w[order])


def process_episode(raw: RawEpisode, scene: str, task: str, episode: str) -> EpisodeRecord:
    """Run the full synchronization/interpolation/calibration chain."""
    valid_idx, corrected = synchronize(raw)
    track_corrected = [(t + raw.tracking_latency, p) for t, p in raw.track]
    cam_poses = interpolate_poses(track_corrected, corrected)
    ee_poses = [camera_to_ee(p, raw.cam_to_ee) for p in cam_poses]
    det_corrected = [(t + raw.tracking_latency, l, r) for t, l, r in raw.tag_detections]
    widths = gripper_widths(det_corrected, raw.gripper_cal, corrected)
    return EpisodeRecord(scene=scene, task=task, episode=episode,
                         valid_indices=valid_idx, pose_interp=ee_poses,
                         gripper_widths=widths)


def episode_dir(root, scene: str, task: str, episode: str) -> Path:
    return Path(root) / scene / task / PROCESSED_DIRNAME / episode


def write_processed(root, record: EpisodeRecord,
                    frames: dict[int, np.ndarray] | None = None,
                    frame_src: Path | None = None,
                    overwrite: bool = False) -> Path:
    """Write the processed directory layout; frames come either from an
    in-memory dict or are copied from an existing frame directory."""
    n = len(record.valid_indices)
    if n == 0:
        raise PipelineError(f"{record.key}: refusing to write empty valid_indices")
    if not (len(record.pose_interp) == n == len(record.gripper_widths)):
        raise PipelineError(f"{record.key}: array length mismatch "
                            f"({len(record.pose_interp)} poses, {n} indices, "
                            f"{len(record.gripper_widths)} widths)")
    out = episode_dir(root, record.scene, record.task, record.episode)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise PipelineError(f"{out}: target exists and is non-empty (use overwrite)")
        shutil.rmtree(out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    write_array(out / "valid_indices.arr", "valid_indices",
                np.asarray(record.valid_indices, dtype=np.int64))
    mats = np.stack([p.matrix() for p in record.pose_interp])
    write_array(out / "pose_interp.arr", "pose_interp", mats)
    write_array(out / "gripper_widths.arr", "gripper_widths",
                np.asarray(record.gripper_widths, dtype=np.float64))
    for idx in record.valid_indices:
        idx = int(idx)
        name = f"frame_{idx}.ppm"
        if frames is not None and idx in frames:
            write_ppm(frames_dir / name, frames[idx])
        elif frame_src is not None:
            shutil.copyfile(Path(frame_src) / name, frames_dir / name)
        else:
            raise PipelineError(f"{record.key}: no raster for frame {idx}")
    record.frames_dir = frames_dir
    return out


def read_processed(root, scene: str, task: str, episode: str) -> EpisodeRecord:
    path = episode_dir(root, scene, task, episode)
    if not path.is_dir():
        raise PipelineError(f"{path}: processed episode not found")
    _, valid_idx = read_array(path / "valid_indices.arr")
    _, mats = read_array(path / "pose_interp.arr")
    _, widths = read_array(path / "gripper_widths.arr")
    poses = [Pose.from_matrix(m) for m in mats]
    return EpisodeRecord(scene=scene, task=task, episode=episode,
                         valid_indices=valid_idx.astype(np.int64),
                         pose_interp=poses, gripper_widths=widths,
                         frames_dir=path / "frames")


@dataclass
class ValidationReport:
    key: str
    passed: bool
    reasons: list[str]


def validate_episode(record: EpisodeRecord, k: int, h: int,
                     image_size: tuple[int, int] | None = None) -> ValidationReport:
    """Check array presence/alignment, box validity, and minimum length."""
    reasons: list[str] = []
    n = len(record.valid_indices)
    if n == 0:
        reasons.append("empty valid_indices")
    if len(record.pose_interp) != n:
        reasons.append(f"pose_interp length {len(record.pose_interp)} != {n}")
    if len(record.gripper_widths) != n:
        reasons.append(f"gripper_widths length {len(record.gripper_widths)} != {n}")
    if n and np.any(np.diff(record.valid_indices) <= 0):
        reasons.append("valid_indices not sorted/unique")
    if n < k + h + 1:
        reasons.append(f"too short: {n} valid frames < K+H+1 = {k + h + 1}")
    if image_size is not None:
        w, hh = image_size
        for label, box in (("object", record.prompt_object), ("target", record.prompt_target)):
            if box is None:
                reasons.append(f"missing {label} box")
            elif not box.valid_in(w, hh):
                reasons.append(f"invalid {label} box {box.as_list()}")
    return ValidationReport(key=record.key, passed=not reasons, reasons=reasons)
