"""Tests for the command-line interface and the annotation server."""

import json
import struct
import threading
import urllib.error
import urllib.request
import zlib
from pathlib import Path

import numpy as np
import pytest

from promptraj.cli import (export_annotation_assets, main,
                           make_annotation_server, save_annotation_entry,
                           write_png)

MINI_MODEL = ["--width", "16", "--image-size", "48", "--history-len", "2",
              "--horizon", "4", "--fusion-layers", "1", "--decoder-layers", "1",
              "--variant", "bbox"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny generated dataset with a split and a short training run."""
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-synth", "--root", str(root), "--episodes-per-scene", "2",
                 "--frames", "24", "--image-size", "48", "--seed", "0"]) == 0
    assert main(["split", "--root", str(root), "--val-ratio", "0.3",
                 "--seed", "0"]) == 0
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--root", str(root), "--out", str(run),
                 "--epochs", "2", "--batch-size", "8", "--lr", "1e-3",
                 "--seed", "0", *MINI_MODEL]) == 0
    return root, run


# --- usage errors -------------------------------------------------------------------

class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["split", "--root", "/tmp", "--frobnicate"])
        assert e.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["transmogrify"])
        assert e.value.code == 2

    def test_missing_root_dir_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["split", "--root", str(tmp_path / "nope")])
        assert e.value.code == 2

    def test_root_required_without_env(self, monkeypatch):
        monkeypatch.delenv("PROMPTRAJ_DATA_ROOT", raising=False)
        with pytest.raises(SystemExit) as e:
            main(["split"])
        assert e.value.code == 2

    def test_missing_manifest_path_exits_2(self, workspace):
        root, _ = workspace
        with pytest.raises(SystemExit) as e:
            main(["train", "--root", str(root), "--out", "/tmp/x",
                  "--manifest", str(root / "missing.json")])
        assert e.value.code == 2


def test_env_var_supplies_root(workspace, monkeypatch, tmp_path):
    root, _ = workspace
    monkeypatch.setenv("PROMPTRAJ_DATA_ROOT", str(root))
    out = tmp_path / "m.json"
    assert main(["split", "--val-ratio", "0.3", "--seed", "1",
                 "--out", str(out)]) == 0
    assert out.is_file()


# --- runtime failures ---------------------------------------------------------------

class TestRuntimeErrors:
    def test_eval_before_train_reports_no_checkpoint(self, workspace, tmp_path,
                                                     capsys):
        root, _ = workspace
        rc = main(["eval", "--root", str(root), "--run", str(tmp_path)])
        assert rc == 1
        record = json.loads(capsys.readouterr().err)
        assert "no checkpoint" in record["message"]
        assert record["command"] == "eval"
        assert record["error"]

    def test_preprocess_without_raw_fails(self, tmp_path, capsys):
        (tmp_path / "d").mkdir()
        rc = main(["preprocess", "--root", str(tmp_path / "d")])
        assert rc == 1
        assert "no raw recordings" in json.loads(capsys.readouterr().err)["message"]


# --- pipeline commands ----------------------------------------------------------------

class TestSplitCommand:
    def test_same_seed_gives_identical_manifest(self, workspace, tmp_path):
        root, _ = workspace
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["split", "--root", str(root), "--val-ratio", "0.3",
                     "--seed", "5", "--out", str(a)]) == 0
        assert main(["split", "--root", str(root), "--val-ratio", "0.3",
                     "--seed", "5", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_stats_sidecars(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "m.json"
        assert main(["split", "--root", str(root), "--val-ratio", "0.3",
                     "--seed", "0", "--out", str(out), "--stats"]) == 0
        assert (tmp_path / "dataset_stats" / "summary.json").is_file()
        assert (tmp_path / "dataset_stats" / "episode_stats.csv").is_file()


class TestPreprocess:
    def test_round_trip_matches_generated(self, workspace, tmp_path, capsys):
        root, _ = workspace
        # regenerate raw-only data, then preprocess it through the CLI
        alt = tmp_path / "alt"
        alt.mkdir()
        assert main(["gen-synth", "--root", str(alt), "--episodes-per-scene",
                     "1", "--frames", "24", "--image-size", "48",
                     "--seed", "0"]) == 0
        capsys.readouterr()
        assert main(["preprocess", "--root", str(alt), "--overwrite"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["processed"] == 3


class TestFullPipeline:
    def test_train_then_eval_emits_summary(self, workspace, capsys):
        root, run = workspace
        assert (run / "checkpoint_final.ptck").is_file()
        rc = main(["eval", "--root", str(root), "--run", str(run),
                   "--steps", "2"])
        assert rc == 0
        summary = json.loads((run / "eval_metrics" / "all" /
                              "summary.json").read_text())
        assert set(summary) == {"scope", "fde", "fde_all", "pos_l2", "rot_l2",
                                "grip_l1", "num_samples", "seed"}
        printed = json.loads(capsys.readouterr().out)
        assert printed == summary

    def test_stitch_command(self, workspace):
        root, run = workspace
        manifest = json.loads((root / "split_manifest.json").read_text())
        key = manifest["train"][0]["key"]
        rc = main(["stitch", "--root", str(root), "--run", str(run),
                   "--key", key, "--steps", "2"])
        assert rc == 0
        out = run / "stitch" / key.replace("/", "_")
        assert (out / "stitch_curve.csv").is_file()
        assert (out / "stitch_curve.svg").is_file()

    def test_plot_command(self, workspace, tmp_path):
        _, run = workspace
        out = tmp_path / "loss.svg"
        rc = main(["plot", "--csv", str(run / "train_log.csv"),
                   "--out", str(out), "--y", "loss"])
        assert rc == 0
        assert "<polyline" in out.read_text()

    def test_validate_command(self, workspace, capsys):
        root, _ = workspace
        rc = main(["validate", "--root", str(root), "--history-len", "2",
                   "--horizon", "4"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["episodes"] == 6 and not report["invalid"]


# --- png ------------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    assert blob[:8] == b"\x89PNG\r\n\x1a\n"
    pos, chunks = 8, {}
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        chunks.setdefault(tag, b"")
        chunks[tag] += blob[pos + 8:pos + 8 + length]
        pos += 12 + length
    w, h, depth, color = struct.unpack(">IIBB", chunks[b"IHDR"][:10])
    assert depth == 8 and color == 2
    rows = zlib.decompress(chunks[b"IDAT"])
    stride = 1 + 3 * w
    out = np.zeros((h, w, 3), dtype=np.uint8)
    for y in range(h):
        row = rows[y * stride:(y + 1) * stride]
        assert row[0] == 0, "only filter type 0 expected"
        out[y] = np.frombuffer(row[1:], dtype=np.uint8).reshape(w, 3)
    return out


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 255, (21, 17, 3), dtype=np.uint8)
    write_png(tmp_path / "x.png", image)
    np.testing.assert_array_equal(read_png(tmp_path / "x.png"), image)


# --- annotation export and server ------------------------------------------------------

class TestAnnotExport:
    def test_exports_pngs_and_index(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "export"
        rc = main(["annot-export", "--root", str(root), "--out", str(out)])
        assert rc == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index) == 6
        for entry in index:
            assert set(entry) == {"key", "frame_path", "image_width",
                                  "image_height", "annotated"}
            assert entry["annotated"] is True
            assert (out / entry["frame_path"]).is_file()
            img = read_png(out / entry["frame_path"])
            assert img.shape == (entry["image_height"], entry["image_width"], 3)

    def test_exported_frame_matches_processed_frame_0(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "export"
        export_annotation_assets(root, out)
        from promptraj.pipeline import read_processed
        index = json.loads((out / "index.json").read_text())
        e = index[0]
        scene, task, episode = e["key"].split("/")
        record = read_processed(root, scene, task, episode)
        np.testing.assert_array_equal(read_png(out / e["frame_path"]),
                                      record.frame(int(record.valid_indices[0])))


class TestSaveAnnotationEntry:
    def test_preserves_other_entries_and_is_byte_stable(self, tmp_path):
        root = tmp_path
        existing = {"s/t/e0": {"boxes": [[1, 1, 2, 2], [3, 3, 4, 4]],
                               "object": [1, 1, 2, 2], "target": [3, 3, 4, 4]}}
        (root / "annotations_merged.json").write_text(
            json.dumps(existing, indent=1, sort_keys=True))
        entry = {"boxes": [[5.0, 5.0, 9.0, 9.0], [10.0, 10.0, 20.0, 20.0]]}
        save_annotation_entry(root, "s/t/e1", entry)
        first = (root / "annotations_merged.json").read_bytes()
        merged = json.loads(first)
        assert set(merged) == {"s/t/e0", "s/t/e1"}
        assert merged["s/t/e0"] == existing["s/t/e0"]
        assert merged["s/t/e1"]["object"] == [5.0, 5.0, 9.0, 9.0]
        save_annotation_entry(root, "s/t/e1", entry)
        assert (root / "annotations_merged.json").read_bytes() == first

    def test_rejects_degenerate_boxes(self, tmp_path):
        from promptraj.cli import ContractErrorForHttp
        with pytest.raises(ContractErrorForHttp):
            save_annotation_entry(tmp_path, "s/t/e",
                                  {"boxes": [[5, 5, 5, 9], [1, 1, 2, 2]]})
        with pytest.raises(ContractErrorForHttp):
            save_annotation_entry(tmp_path, "s/t/e", {"boxes": [[1, 1, 2, 2]]})


@pytest.fixture()
def server(workspace, tmp_path):
    root, _ = workspace
    export = tmp_path / "export"
    export_annotation_assets(root, export)
    srv = make_annotation_server(root, export, port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{srv.server_address[1]}"
    yield root, export, base
    srv.shutdown()


class TestAnnotationServer:
    def _get(self, url):
        with urllib.request.urlopen(url) as r:
            return r.status, r.read()

    def _put(self, url, payload):
        req = urllib.request.Request(url, data=json.dumps(payload).encode(),
                                     method="PUT")
        with urllib.request.urlopen(req) as r:
            return r.status, json.loads(r.read())

    def test_serves_index_and_frames(self, server):
        _, export, base = server
        status, body = self._get(f"{base}/api/index")
        assert status == 200
        index = json.loads(body)
        assert len(index) == 6
        status, png = self._get(f"{base}/{index[0]['frame_path']}")
        assert status == 200 and png[:8] == b"\x89PNG\r\n\x1a\n"

    def test_put_saves_annotation(self, server):
        root, _, base = server
        status, body = self._put(
            f"{base}/api/annotations/structured/custom_task/ep000",
            {"boxes": [[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]})
        assert status == 200 and body["ok"] is True
        merged = json.loads((root / "annotations_merged.json").read_text())
        assert merged["structured/custom_task/ep000"]["object"] == [1, 2, 3, 4]
        status, body = self._get(f"{base}/api/annotations")
        assert "structured/custom_task/ep000" in json.loads(body)

    def test_put_degenerate_box_is_400(self, server):
        _, _, base = server
        req = urllib.request.Request(
            f"{base}/api/annotations/s/t/e",
            data=json.dumps({"boxes": [[3, 3, 3, 3], [1, 1, 2, 2]]}).encode(),
            method="PUT")
        with pytest.raises(urllib.error.HTTPError) as e:
            urllib.request.urlopen(req)
        assert e.value.code == 400

    def test_unknown_path_is_404(self, server):
        _, _, base = server
        with pytest.raises(urllib.error.HTTPError) as e:
            urllib.request.urlopen(f"{base}/definitely/not/here")
        assert e.value.code == 404
