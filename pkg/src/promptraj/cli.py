"""Command-line entry point wiring dataset generation, preprocessing,
splits, training, evaluation, plots, and the annotation export/server.

Usage errors (unknown flags, missing paths) exit with status 2; runtime
failures print a machine-readable JSON error record to stderr and exit
with status 1. The data root defaults to the PROMPTRAJ_DATA_ROOT
environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import struct
import sys
import zlib
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint
from .dataset import (ANNOTATIONS_FILENAME, NormStats, SplitManifest,
                      build_samples, make_split, parse_annotations,
                      split_tv_distance, write_dataset_stats)
from .errors import ConfigError, PipelineError, PromptrajError
from .evaluation import evaluate, stitch_eval, write_svg_lines
from .model import ModelConfig, init_params
from .pipeline import (PROCESSED_DIRNAME, process_episode, read_processed,
                       validate_episode, write_processed)
from .synthworld import RAW_DIRNAME, WorldConfig, emit_dataset, read_raw
from .training import TrainConfig, prepare_data, train

DATA_ROOT_ENV = "PROMPTRAJ_DATA_ROOT"


# --- shared helpers ----------------------------------------------------------------

def discover_processed(root) -> list[dict]:
    """Episode entries {key, scene, task, episode, path} under ``root``."""
    root = Path(root)
    entries = []
    for ep_dir in sorted(root.glob(f"*/*/{PROCESSED_DIRNAME}/*")):
        if not ep_dir.is_dir():
            continue
        scene, task, episode = ep_dir.parts[-4], ep_dir.parts[-3], ep_dir.parts[-1]
        entries.append({"key": f"{scene}/{task}/{episode}", "scene": scene,
                        "task": task, "episode": episode, "path": str(ep_dir)})
    return entries


def load_annotations(root, image_size=None):
    path = Path(root) / ANNOTATIONS_FILENAME
    if not path.is_file():
        return {}, []
    return parse_annotations(path.read_text(), image_size)


def load_manifest_records(root, entries) -> list:
    return [read_processed(root, e["scene"], e["task"], e["episode"])
            for e in entries]


def build_split_data(root, entries, model_config: ModelConfig, stride: int,
                     annotations):
    records = load_manifest_records(root, entries)
    samples = []
    for r in records:
        samples.extend(build_samples(r, k=model_config.history_len,
                                     h=model_config.horizon, stride=stride))
    if not samples:
        raise PipelineError("no samples in split; episodes too short?")
    return prepare_data(samples, model_config.variant, annotations,
                        (model_config.image_size, model_config.image_size))


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as an 8-bit truecolor PNG."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    raw = b"".join(b"\x00" + image[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    Path(path).write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
                           + chunk(b"IDAT", zlib.compress(raw, 9))
                           + chunk(b"IEND", b""))


def _load_run(args) -> tuple[dict, ModelConfig, NormStats]:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else \
        Path(args.run) / "checkpoint_final.ptck"
    if not ckpt_path.is_file():
        raise PipelineError(f"no checkpoint at {ckpt_path}; train first")
    ckpt = load_checkpoint(ckpt_path)
    extra = ckpt["extra"]
    if "model_config" not in extra or "norm_stats" not in extra:
        raise PipelineError(f"{ckpt_path}: checkpoint lacks model config "
                            f"or normalization stats")
    config = ModelConfig(**extra["model_config"])
    stats = NormStats.from_dict(extra["norm_stats"])
    return ckpt["params"], config, stats


def _emit(record: dict) -> None:
    print(json.dumps(record, indent=1, sort_keys=True))


# --- subcommands --------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    config = WorldConfig.load(args.world_config) if args.world_config \
        else WorldConfig()
    overrides = {}
    if args.episodes_per_scene is not None:
        overrides["episodes_per_scene"] = args.episodes_per_scene
    if args.frames is not None:
        overrides["frames_per_episode"] = args.frames
    if args.image_size is not None:
        overrides["image_width"] = args.image_size
        overrides["image_height"] = args.image_size
    if overrides:
        config = dataclasses.replace(config, **overrides)
    manifest = emit_dataset(args.root, config, args.seed,
                            write_raw_recordings=not args.no_raw,
                            overwrite=args.overwrite)
    _emit({"root": str(args.root), "episodes": len(manifest["episodes"]),
           "seed": args.seed})
    return 0


def cmd_preprocess(args) -> int:
    root = Path(args.root)
    raw_dirs = sorted(root.glob(f"*/*/{RAW_DIRNAME}/*"))
    if not raw_dirs:
        raise PipelineError(f"no raw recordings under {root}")
    count = 0
    for raw_dir in raw_dirs:
        scene, task, episode = (raw_dir.parts[-4], raw_dir.parts[-3],
                                raw_dir.parts[-1])
        raw = read_raw(raw_dir)
        record = process_episode(raw, scene, task, episode)
        write_processed(root, record, frames=raw.frames,
                        overwrite=args.overwrite)
        count += 1
    _emit({"root": str(root), "processed": count})
    return 0


def cmd_split(args) -> int:
    entries = discover_processed(args.root)
    if not entries:
        raise PipelineError(f"no processed episodes under {args.root}")
    manifest = make_split(entries, args.val_ratio, args.seed)
    out = Path(args.out) if args.out else Path(args.root) / "split_manifest.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    if args.stats:
        records = load_manifest_records(args.root, entries)
        annotations, _ = load_annotations(args.root)
        samples_by_key = {r.key: build_samples(r) for r in records}
        write_dataset_stats(out.parent / "dataset_stats", records,
                            samples_by_key, manifest, annotations)
    _emit({"manifest": str(out), "train": len(manifest.train),
           "val": len(manifest.val),
           "tv_distance": split_tv_distance(manifest)})
    return 0


_MODEL_FLAGS = ("variant", "head", "width", "image_size", "history_len",
                "horizon", "fusion_layers", "decoder_layers")
_TRAIN_FLAGS = ("lr", "batch_size", "epochs", "seed", "schedule", "grad_clip",
                "weight_decay", "validation_every")


def _configs_from(args) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = json.loads(Path(args.model_config).read_text()) \
        if args.model_config else {}
    for name in _MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            model_kwargs[name] = value
    train_kwargs = {}
    for name in _TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            train_kwargs[name] = value
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def cmd_train(args) -> int:
    model_config, train_config = _configs_from(args)
    manifest_path = Path(args.manifest) if args.manifest \
        else Path(args.root) / "split_manifest.json"
    if not manifest_path.is_file():
        raise PipelineError(f"no split manifest at {manifest_path}; "
                            f"run split first")
    manifest = SplitManifest.load(manifest_path)
    annotations, _ = load_annotations(args.root)
    data = build_split_data(args.root, manifest.train, model_config,
                            args.stride, annotations)
    val_data = None
    if args.validate and manifest.val:
        val_data = build_split_data(args.root, manifest.val, model_config,
                                    args.stride, annotations)
    params = init_params(model_config, seed=train_config.seed)
    result = train(params, model_config, data, train_config,
                   out_dir=args.out, val_data=val_data)
    _emit({"out": str(args.out), "steps": len(result["log"]),
           "final_loss": result["log"][-1][2],
           "train_samples": len(data)})
    return 0


def cmd_eval(args) -> int:
    params, model_config, stats = _load_run(args)
    manifest_path = Path(args.manifest) if args.manifest \
        else Path(args.root) / "split_manifest.json"
    if not manifest_path.is_file():
        raise PipelineError(f"no split manifest at {manifest_path}")
    manifest = SplitManifest.load(manifest_path)
    entries = manifest.val if args.split == "val" else manifest.train
    if not entries:
        raise PipelineError(f"{args.split} split is empty")
    annotations, _ = load_annotations(args.root)
    data = build_split_data(args.root, entries, model_config, args.stride,
                            annotations)
    out = Path(args.out) if args.out else \
        (Path(args.run) if args.run else Path(args.checkpoint).parent)
    reports = evaluate(params, model_config, data, stats, out,
                       seed=args.seed, steps=args.steps)
    _emit(reports["all"].to_dict())
    return 0


def cmd_stitch(args) -> int:
    params, model_config, stats = _load_run(args)
    parts = [p for p in args.key.split("/") if p]
    if len(parts) != 3:
        raise ConfigError(f"--key must be scene/task/episode, got {args.key!r}")
    record = read_processed(args.root, *parts)
    annotations, _ = load_annotations(args.root)
    out = Path(args.out) if args.out else \
        (Path(args.run) if args.run else Path(args.checkpoint).parent) \
        / "stitch" / "_".join(parts)
    curve, final = stitch_eval(params, model_config, record,
                               annotations.get(record.key), stats,
                               out_dir=out, seed=args.seed, steps=args.steps,
                               stride=args.stride)
    _emit({"key": record.key, "out": str(out), "final_error": final,
           "mean_error": float(np.mean(curve))})
    return 0


def cmd_plot(args) -> int:
    with open(args.csv, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise PipelineError(f"{args.csv}: no data rows to plot")
    header, body = rows[0], rows[1:]

    def column(name):
        if name not in header:
            raise ConfigError(f"{args.csv}: no column {name!r}; "
                              f"available: {header}")
        i = header.index(name)
        return np.array([float(r[i]) for r in body])

    x_name = args.x if args.x else header[0]
    y_names = args.y
    if not y_names:
        y_names = []
        for name in header:
            if name == x_name:
                continue
            try:
                float(body[0][header.index(name)])
                y_names.append(name)
            except ValueError:
                continue
        if not y_names:
            raise PipelineError(f"{args.csv}: no numeric columns to plot")
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".svg")
    write_svg_lines(out, column(x_name), {n: column(n) for n in y_names},
                    title=args.title or Path(args.csv).stem,
                    xlabel=x_name, ylabel=", ".join(y_names))
    _emit({"out": str(out), "series": y_names})
    return 0


def export_annotation_assets(root, out_dir) -> list[dict]:
    """Write frame-0 PNGs plus index.json for the annotation UI."""
    entries = discover_processed(root)
    if not entries:
        raise PipelineError(f"no processed episodes under {root}")
    annotations, _ = load_annotations(root)
    out_dir = Path(out_dir)
    index = []
    for e in entries:
        record = read_processed(root, e["scene"], e["task"], e["episode"])
        frame = record.frame(int(record.valid_indices[0]))
        rel = f"{e['scene']}/{e['task']}/{e['episode']}.png"
        png_path = out_dir / rel
        png_path.parent.mkdir(parents=True, exist_ok=True)
        write_png(png_path, frame)
        index.append({"key": e["key"], "frame_path": rel,
                      "image_width": int(frame.shape[1]),
                      "image_height": int(frame.shape[0]),
                      "annotated": e["key"] in annotations})
    (out_dir / "index.json").write_text(json.dumps(index, indent=1,
                                                   sort_keys=True))
    return index


def save_annotation_entry(root, key: str, entry: dict) -> None:
    """Insert or replace one episode's entry in the merged annotation file.

    The whole file is rewritten atomically (temp file + rename) with sorted
    keys so repeated saves are byte-stable and other entries are preserved.
    """
    boxes = entry.get("boxes")
    if (not isinstance(boxes, list) or len(boxes) != 2
            or any(not isinstance(b, list) or len(b) != 4 for b in boxes)):
        raise ContractErrorForHttp("entry must carry boxes: [object, target], "
                                   "each [x_min, y_min, x_max, y_max]")
    for b in boxes:
        if not (b[0] < b[2] and b[1] < b[3]):
            raise ContractErrorForHttp(f"degenerate box {b}")
    path = Path(root) / ANNOTATIONS_FILENAME
    merged = json.loads(path.read_text()) if path.is_file() else {}
    merged[key] = {"boxes": [[float(v) for v in b] for b in boxes],
                   "object": [float(v) for v in boxes[0]],
                   "target": [float(v) for v in boxes[1]]}
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(merged, indent=1, sort_keys=True))
    os.replace(tmp, path)


class ContractErrorForHttp(PromptrajError):
    """Invalid annotation payload submitted over the save endpoint."""


_CONTENT_TYPES = {".png": "image/png", ".json": "application/json",
                  ".html": "text/html", ".js": "text/javascript",
                  ".css": "text/css", ".svg": "image/svg+xml"}


def make_annotation_server(root, export_dir, ui_dir=None,
                           port: int = 0) -> ThreadingHTTPServer:
    """HTTP server for the browser annotation tool.

    GET /api/index             -> episode index JSON
    GET /api/annotations       -> merged annotation JSON
    PUT /api/annotations/<key> -> save one episode's boxes
    GET /<path>                -> static files (UI dir first, then exports)
    """
    root = Path(root)
    export_dir = Path(export_dir)
    ui_dir = Path(ui_dir) if ui_dir else None

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *a):  # keep test output quiet
            pass

        def _send(self, status: int, body: bytes, ctype: str) -> None:
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, payload) -> None:
            self._send(status, json.dumps(payload).encode(),
                       "application/json")

        def do_GET(self):
            path = self.path.split("?")[0]
            if path == "/api/index":
                index = export_dir / "index.json"
                if not index.is_file():
                    return self._send_json(404, {"error": "no index.json"})
                return self._send(200, index.read_bytes(), "application/json")
            if path == "/api/annotations":
                merged = root / ANNOTATIONS_FILENAME
                body = merged.read_bytes() if merged.is_file() else b"{}"
                return self._send(200, body, "application/json")
            rel = path.lstrip("/") or "index.html"
            for base in filter(None, (ui_dir, export_dir)):
                target = (base / rel).resolve()
                if target.is_file() and base.resolve() in target.parents:
                    ctype = _CONTENT_TYPES.get(target.suffix,
                                               "application/octet-stream")
                    return self._send(200, target.read_bytes(), ctype)
            self._send_json(404, {"error": f"not found: {path}"})

        def do_PUT(self):
            prefix = "/api/annotations/"
            if not self.path.startswith(prefix):
                return self._send_json(404, {"error": "unknown endpoint"})
            key = self.path[len(prefix):]
            if len([p for p in key.split("/") if p]) != 3:
                return self._send_json(400,
                                       {"error": f"bad episode key: {key}"})
            length = int(self.headers.get("Content-Length", 0))
            try:
                entry = json.loads(self.rfile.read(length).decode())
                save_annotation_entry(root, key, entry)
            except (json.JSONDecodeError, ContractErrorForHttp) as e:
                return self._send_json(400, {"error": str(e)})
            self._send_json(200, {"ok": True, "key": key})

    return ThreadingHTTPServer(("127.0.0.1", port), Handler)


def cmd_annot_export(args) -> int:
    out_dir = Path(args.out) if args.out else Path(args.root) / "annot_export"
    index = export_annotation_assets(args.root, out_dir)
    _emit({"out": str(out_dir), "episodes": len(index)})
    if args.serve:
        server = make_annotation_server(args.root, out_dir,
                                        ui_dir=args.ui_dir, port=args.port)
        host, port = server.server_address
        print(f"serving annotation UI on http://{host}:{port}/", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            server.shutdown()
    return 0


def cmd_validate(args) -> int:
    entries = discover_processed(args.root)
    if not entries:
        raise PipelineError(f"no processed episodes under {args.root}")
    _, ann_errors = load_annotations(args.root)
    invalid = []
    for e in entries:
        record = read_processed(args.root, e["scene"], e["task"], e["episode"])
        report = validate_episode(record, k=args.history_len, h=args.horizon)
        if not report.passed:
            invalid.append({"key": e["key"], "reasons": report.reasons})
    record = {"episodes": len(entries), "valid": len(entries) - len(invalid),
              "invalid": invalid,
              "annotation_errors": [{"key": k, "reason": r}
                                    for k, r in ann_errors]}
    _emit(record)
    return 0 if not invalid and not ann_errors else 1


# --- argument parsing ----------------------------------------------------------------

def _add_root(p: argparse.ArgumentParser, must_exist: bool = True) -> None:
    p.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV),
                   help=f"data root (default: ${DATA_ROOT_ENV})")
    p.set_defaults(_needs_root=True, _root_must_exist=must_exist)


def _add_run(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", help="training output directory")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--steps", type=int, default=10,
                   help="sampler integration steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptraj",
        description="Spatially prompted trajectory prediction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="emit the synthetic benchmark")
    _add_root(p, must_exist=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-config", help="world config file")
    p.add_argument("--episodes-per-scene", type=int)
    p.add_argument("--frames", type=int, help="frames per episode")
    p.add_argument("--image-size", type=int)
    p.add_argument("--no-raw", action="store_true",
                   help="skip raw recordings, write processed only")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="process raw recordings")
    _add_root(p)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("split", help="write the train/val split manifest")
    _add_root(p)
    p.add_argument("--val-ratio", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="manifest path (default <root>/split_manifest.json)")
    p.add_argument("--stats", action="store_true",
                   help="also write dataset statistics sidecars")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a trajectory model")
    _add_root(p)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--model-config", help="JSON file of model settings")
    p.add_argument("--variant", choices=("bbox", "point", "none", "vision_bbox",
                                         "vision_bbox_and_bbox"))
    p.add_argument("--head", choices=("flow", "diffusion"))
    p.add_argument("--width", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--history-len", type=int, dest="history_len")
    p.add_argument("--horizon", type=int)
    p.add_argument("--fusion-layers", type=int, dest="fusion_layers")
    p.add_argument("--decoder-layers", type=int, dest="decoder_layers")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--schedule")
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--validation-every", type=int, dest="validation_every")
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--validate", action="store_true",
                   help="run periodic validation on the val split")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    _add_root(p)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", help="report directory (default: run directory)")
    _add_run(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stitch", help="stitched full-episode rollout")
    _add_root(p)
    p.add_argument("--key", required=True, help="scene/task/episode")
    p.add_argument("--out")
    _add_run(p)
    p.set_defaults(fn=cmd_stitch)

    p = sub.add_parser("plot", help="render a metric CSV as an SVG chart")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")
    p.add_argument("--x", help="x-axis column (default: first)")
    p.add_argument("--y", action="append", help="series column (repeatable)")
    p.add_argument("--title")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("annot-export",
                       help="export frame-0 images for annotation")
    _add_root(p)
    p.add_argument("--out", help="export directory (default <root>/annot_export)")
    p.add_argument("--serve", action="store_true",
                   help="serve the annotation UI over HTTP")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir", help="static frontend directory to serve")
    p.set_defaults(fn=cmd_annot_export)

    p = sub.add_parser("validate", help="check processed episodes")
    _add_root(p)
    p.add_argument("--history-len", type=int, default=4, dest="history_len")
    p.add_argument("--horizon", type=int, default=16)
    p.set_defaults(fn=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "_needs_root", False):
        if args.root is None:
            parser.error(f"--root is required (or set ${DATA_ROOT_ENV})")
        if args._root_must_exist and not Path(args.root).is_dir():
            parser.error(f"data root does not exist: {args.root}")
    for name in ("manifest", "world_config", "model_config", "csv",
                 "checkpoint", "ui_dir"):
        value = getattr(args, name, None)
        if value is not None and not Path(value).exists():
            parser.error(f"path does not exist: {value}")
    try:
        return args.fn(args)
    except PromptrajError as e:
        json.dump({"error": type(e).__name__, "message": str(e),
                   "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
