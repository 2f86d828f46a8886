"""Chunk metrics, deterministic evaluation reports, and stitched rollouts.

Metrics operate on denormalized 10D waypoint chunks: translation L2 and
rot6d L2 averaged over the horizon, gripper L1, and the endpoint
translation error. The headline endpoint metric (``fde``) averages only
samples flagged as the last predictable chunk of their episode;
``fde_all`` averages every sample's endpoint error for comparability.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import NormStats, Sample, build_samples
from .errors import ContractError, PipelineError
from .geometry import stitch
from .model import ModelConfig, encode_condition
from .pipeline import EpisodeRecord
from .training import TrainData, prepare_data, sample_chunks


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 10:
        raise ContractError(f"metric inputs must be matching (..., H, 10) chunks, "
                            f"got {p.shape} vs {g.shape}")
    return p, g


def pos_l2(pred, gt) -> float:
    """Mean over the horizon of the translation L2 error (meters)."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p[..., :3] - g[..., :3], axis=-1).mean())


def rot_l2(pred, gt) -> float:
    """Mean over the horizon of the raw 6D-rotation L2 error."""
    p, g = _pair(pred, gt)
    return float(np.linalg.norm(p[..., 3:9] - g[..., 3:9], axis=-1).mean())


def grip_l1(pred, gt) -> float:
    """Mean absolute gripper-width error (meters)."""
    p, g = _pair(pred, gt)
    return float(np.abs(p[..., 9] - g[..., 9]).mean())


def endpoint_error(pred, gt) -> np.ndarray:
    """Per-sample translation error at the final waypoint."""
    p, g = _pair(pred, gt)
    return np.linalg.norm(p[..., -1, :3] - g[..., -1, :3], axis=-1)


def fde(pred, gt, is_final) -> float | None:
    """Endpoint error averaged over final-chunk samples only.

    Returns None (reported as absent) when the scope has no final chunks.
    """
    flags = np.asarray(is_final, dtype=bool)
    errs = endpoint_error(pred, gt)
    if errs.ndim == 0:
        errs = errs[None]
    if flags.shape != errs.shape:
        raise ContractError(f"fde: {errs.shape[0]} samples but {flags.shape} flags")
    if not flags.any():
        return None
    return float(errs[flags].mean())


@dataclass
class MetricsReport:
    scope: str
    fde: float | None
    fde_all: float
    pos_l2: float
    rot_l2: float
    grip_l1: float
    num_samples: int
    seed: int

    def __post_init__(self):
        if self.num_samples <= 0:
            raise ContractError("MetricsReport: num_samples must be > 0")
        for name in ("fde_all", "pos_l2", "rot_l2", "grip_l1"):
            if getattr(self, name) < 0:
                raise ContractError(f"MetricsReport: {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"scope": self.scope, "fde": self.fde, "fde_all": self.fde_all,
                "pos_l2": self.pos_l2, "rot_l2": self.rot_l2,
                "grip_l1": self.grip_l1, "num_samples": self.num_samples,
                "seed": self.seed}


def sample_noise(seed: int, key: str, timestep: int, shape) -> np.ndarray:
    """Initial action noise derived from (seed, sample identity) by hashing,
    so evaluation order and batching cannot change it."""
    digest = hashlib.sha256(f"{seed}/{key}/{timestep}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(shape)


def predict_chunks(params: dict, config: ModelConfig, data: TrainData,
                   stats: NormStats, seed: int = 0, steps: int = 10,
                   batch_size: int = 64) -> np.ndarray:
    """Sampled denormalized chunks (S, H, 10) for every sample in ``data``."""
    outputs = []
    n = len(data)
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        hist = stats.normalize(data.history[idx])
        cond = encode_condition(params, config, data.first[idx],
                                data.current[idx], hist,
                                [data.payloads[i] for i in idx])
        noise = np.stack([sample_noise(seed, data.keys[i][0], data.keys[i][1],
                                       (config.horizon, 10)) for i in idx])
        outputs.append(sample_chunks(params, config, cond, stats, noise, steps))
    return np.concatenate(outputs, axis=0)


def _report(scope: str, pred, gt, is_final, seed: int) -> MetricsReport:
    return MetricsReport(scope=scope,
                         fde=fde(pred, gt, is_final),
                         fde_all=float(endpoint_error(pred, gt).mean()),
                         pos_l2=pos_l2(pred, gt),
                         rot_l2=rot_l2(pred, gt),
                         grip_l1=grip_l1(pred, gt),
                         num_samples=len(gt), seed=seed)


def evaluate(params: dict, config: ModelConfig, data: TrainData,
             stats: NormStats, out_dir, seed: int = 0,
             steps: int = 10) -> dict[str, MetricsReport]:
    """Deterministic evaluation over all samples with overall and per-scene
    reports written under ``out_dir``/eval_metrics/."""
    if len(data) == 0:
        raise ContractError("evaluate: no samples")
    pred = predict_chunks(params, config, data, stats, seed=seed, steps=steps)
    gt = data.future
    scenes = np.array([key.split("/")[0] for key, _ in data.keys])
    reports = {"all": _report("all", pred, gt, data.is_final, seed)}
    for scene in sorted(set(scenes)):
        m = scenes == scene
        reports[scene] = _report(scene, pred[m], gt[m], data.is_final[m], seed)

    out_dir = Path(out_dir)
    per_err = endpoint_error(pred, gt)
    for scope, report in reports.items():
        scope_dir = out_dir / "eval_metrics" / scope
        scope_dir.mkdir(parents=True, exist_ok=True)
        (scope_dir / "summary.json").write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        mask = np.ones(len(gt), dtype=bool) if scope == "all" else scenes == scope
        with open(scope_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["key", "timestep", "is_final", "pos_l2", "rot_l2",
                        "grip_l1", "endpoint_error"])
            for i in np.nonzero(mask)[0]:
                key, t = data.keys[i]
                w.writerow([key, t, int(data.is_final[i]),
                            repr(pos_l2(pred[i], gt[i])),
                            repr(rot_l2(pred[i], gt[i])),
                            repr(grip_l1(pred[i], gt[i])),
                            repr(float(per_err[i]))])
    return reports


# --- stitched full-episode evaluation ----------------------------------------------

def stitch_eval(params: dict, config: ModelConfig, record: EpisodeRecord,
                annotation, stats: NormStats, out_dir=None, seed: int = 0,
                steps: int = 10, stride: int = 3,
                chunk_fn=None) -> tuple[np.ndarray, float]:
    """Stitch sequential predicted chunks over one episode.

    Chunks are predicted at anchors K, K+H, K+2H, ... (subsampled
    timesteps), composed onto ground-truth anchor poses, and compared to
    the ground-truth world positions. Returns (per-timestep position error
    curve, final error); timesteps no chunk covers contribute zero.
    """
    samples = build_samples(record, k=config.history_len, h=config.horizon,
                            stride=stride)
    if not samples:
        raise PipelineError(f"{record.key}: episode too short to stitch")
    n_timesteps = samples[-1].timestep + config.horizon + 1
    wanted = range(config.history_len, n_timesteps - config.horizon,
                   config.horizon)
    chosen = [s for s in samples if s.timestep in set(wanted)]
    if chunk_fn is None:
        data = prepare_data(chosen, config.variant, {record.key: annotation},
                            (config.image_size, config.image_size))
        pred = predict_chunks(params, config, data, stats, seed=seed, steps=steps)
    else:
        pred = np.stack([chunk_fn(s) for s in chosen])

    anchors = [s.anchor_pose for s in chosen]
    world = stitch(list(pred), anchors)

    positions = np.arange(0, len(record.valid_indices), stride)
    curve = np.zeros(n_timesteps)
    for i, s in enumerate(chosen):
        for j in range(config.horizon):
            t = s.timestep + 1 + j
            if t >= n_timesteps:
                break
            gt_pose = record.pose_interp[positions[t]]
            curve[t] = np.linalg.norm(world[i * config.horizon + j].position
                                      - gt_pose.position)
    final_error = float(curve[max(s.timestep + config.horizon for s in chosen)])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "stitch_curve.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestep", "frame_index", "position_error"])
            for t, err in enumerate(curve):
                w.writerow([t, int(record.valid_indices[positions[t]]),
                            repr(float(err))])
        write_svg_lines(out_dir / "stitch_curve.svg",
                        np.arange(n_timesteps), {"position error (m)": curve},
                        title=f"stitched rollout: {record.key}",
                        xlabel="timestep", ylabel="error (m)")
    return curve, final_error


# --- SVG line charts ------------------------------------------------------------------

_SVG_COLORS = ("#1f6fb2", "#c23b22", "#2e8b57", "#8b5cf6", "#b8860b", "#444444")


def write_svg_lines(path, x, series: dict[str, np.ndarray], title: str = "",
                    xlabel: str = "", ylabel: str = "") -> None:
    """Minimal dependency-free SVG line chart (one polyline per series)."""
    x = np.asarray(x, dtype=np.float64)
    if not series:
        raise ContractError("write_svg_lines: no series")
    width, height, pad = 640, 400, 50
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    x_lo, x_hi = float(x.min()), float(x.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(v):
        return pad + (v - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
             f'stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
             f'font-size="14">{title}</text>',
             f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
             f'font-size="12">{xlabel}</text>',
             f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" '
             f'font-size="12" transform="rotate(-90 14 {height / 2:.0f})">'
             f'{ylabel}</text>',
             f'<text x="{pad}" y="{height - pad + 16}" font-size="10">'
             f'{x_lo:.4g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" '
             f'text-anchor="end">{x_hi:.4g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" font-size="10" '
             f'text-anchor="end">{y_lo:.4g}</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" '
             f'text-anchor="end">{y_hi:.4g}</text>']
    for i, (name, values) in enumerate(series.items()):
        v = np.asarray(values, dtype=np.float64)
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, v))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 + 14 * i}" '
                     f'text-anchor="end" font-size="11" fill="{color}">'
                     f'{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
