import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from vidnce.cli import main
from vidnce.data import load_manifest, write_ppm


TRAIN_FLAGS = [
    "--regime", "multi_frame",
    "--num-videos", "3",
    "--iterations", "4",
    "--memory-size", "12",
    "--checkpoint-every", "2",
    "--input-size", "16",
    "--trunk", "4:3:2,8:3:2",
    "--hidden-dim", "16",
    "--embed-dim", "8",
    "--seed", "0",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    code = main(
        ["generate", "--out", str(out), "--classes", "2", "--videos-per-class", "3",
         "--frames", "3", "--image-size", "32", "--seed", "0"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("cli_run")
    code = main(
        ["train", "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out)] + TRAIN_FLAGS
    )
    assert code == 0
    return out


class TestGenerate:
    def test_outputs(self, corpus_dir):
        records = load_manifest(corpus_dir / "manifest.jsonl")
        assert len(records) == 6
        cfg = json.loads((corpus_dir / "config.json").read_text())
        assert cfg["command"] == "generate"
        assert cfg["classes"] == 2 and cfg["image_size"] == 32

    def test_zero_classes_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--out", str(tmp_path), "--classes", "0"])
        assert exc.value.code == 2


class TestCurate:
    def test_artifacts_and_conservation(self, corpus_dir, tmp_path):
        out = tmp_path / "curated"
        code = main(
            ["curate", "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out),
             "--frames", "2", "--gap", "1"]
        )
        assert code == 0
        report = json.loads((out / "curation.json").read_text())
        assert report["kept"] + report["dropped"] == report["total"] == 6
        kept = load_manifest(out / "manifest.jsonl") if report["kept"] else []
        assert len(kept) == report["kept"]
        for rec in kept:
            assert len(rec.frame_paths) == 2

    def test_empty_manifest_fails(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["curate", "--manifest", str(empty), "--out", str(tmp_path / "o")]) == 1


class TestTrain:
    def test_artifacts(self, run_dir):
        names = set(os.listdir(run_dir))
        assert {"metrics.csv", "checkpoint_final.ckpt", "config.json"} <= names
        assert "checkpoint_0000002.ckpt" in names
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iteration,lr,loss"
        assert len(lines) == 5
        cfg = json.loads((run_dir / "config.json").read_text())
        assert cfg["iterations"] == 4
        assert cfg["trunk"] == [[4, 3, 2], [8, 3, 2]]

    def test_repeat_run_metrics_identical(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "again"
        code = main(["train", "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out)] + TRAIN_FLAGS)
        assert code == 0
        assert (out / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
        assert (out / "checkpoint_final.ckpt").read_bytes() == (run_dir / "checkpoint_final.ckpt").read_bytes()

    def test_resume_in_place_is_byte_identical(self, corpus_dir, run_dir, tmp_path):
        work = tmp_path / "work"
        shutil.copytree(run_dir, work)
        finished_metrics = (work / "metrics.csv").read_bytes()
        finished_ckpt = (work / "checkpoint_final.ckpt").read_bytes()
        code = main(
            ["train", "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(work),
             "--resume", str(work / "checkpoint_0000002.ckpt")]
        )
        assert code == 0
        assert (work / "metrics.csv").read_bytes() == finished_metrics
        assert (work / "checkpoint_final.ckpt").read_bytes() == finished_ckpt

    def test_missing_manifest_fails(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "no.jsonl"), "--out", str(tmp_path / "o")]) == 1


class TestEval:
    def test_metrics_json(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out),
             "--holdout", "0.34", "--probe-epochs", "3"]
        )
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["num_classes"] == 2
        assert 0.0 <= metrics["frame_top1"] <= 1.0
        assert 0.0 <= metrics["video_top1"] <= 1.0
        assert metrics["num_frames_train"] + metrics["num_frames_heldout"] == 18
        assert metrics["num_videos_heldout"] == 2
        assert metrics["checkpoint_iteration"] == 4
        assert len(metrics["checkpoint_sha256"]) == 64

    def test_missing_checkpoint_fails(self, corpus_dir, tmp_path):
        code = main(
            ["eval", "--checkpoint", str(tmp_path / "no.ckpt"),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(tmp_path / "o")]
        )
        assert code == 1

    def test_corrupt_checkpoint_fails(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        code = main(
            ["eval", "--checkpoint", str(bad),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(tmp_path / "o")]
        )
        assert code == 1


class TestKnn:
    def test_neighbors_csv(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "knn"
        records = load_manifest(corpus_dir / "manifest.jsonl")
        code = main(
            ["knn", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out),
             "--query-video", records[0].video_id, "--query-frame", "0", "--k", "3"]
        )
        assert code == 0
        lines = (out / "neighbors.csv").read_text().splitlines()
        assert lines[0] == "rank,video_id,frame_index,similarity"
        assert len(lines) == 4
        top_vid, top_sim = lines[1].split(",")[1], float(lines[1].split(",")[3])
        assert top_vid == records[0].video_id
        assert top_sim == pytest.approx(1.0, abs=1e-5)
        report = json.loads((out / "knn.json").read_text())
        assert report["returned"] == 3 and report["truncated"] is False

    def test_unknown_query_fails(self, corpus_dir, run_dir, tmp_path):
        code = main(
            ["knn", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(tmp_path / "o"),
             "--query-video", "ghost", "--k", "2"]
        )
        assert code == 1


@pytest.fixture(scope="module")
def sequence_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    gen = np.random.default_rng(5)
    background = (gen.uniform(0.1, 0.3, (48, 48, 3)) * 255).astype(np.uint8)
    frame = background.copy()
    frame[11:21, 11:21] = [250, 60, 40]
    frame[14:18, 14:18] = [30, 220, 230]
    for i in range(5):
        write_ppm(out / f"frame_{i:03d}.ppm", frame)
    gt = out / "gt.csv"
    gt.write_text("cx,cy,w,h\n" + "".join("16,16,10,10\n" for _ in range(5)))
    return out


class TestTrack:
    def test_static_sequence_high_precision(self, run_dir, sequence_dir, tmp_path):
        out = tmp_path / "track"
        code = main(
            ["track", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
             "--frames-dir", str(sequence_dir), "--out", str(out),
             "--init-box", "16,16,10,10", "--gt-boxes", str(sequence_dir / "gt.csv"),
             "--scales", "1.0"]
        )
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["frames"] == 5
        assert metrics["precision_auc"] > 0.95
        lines = (out / "boxes.csv").read_text().splitlines()
        assert lines[0] == "frame,cx,cy,w,h"
        assert len(lines) == 6

    def test_bad_init_box_exits_2(self, run_dir, sequence_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(
                ["track", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
                 "--frames-dir", str(sequence_dir), "--out", str(tmp_path / "o"),
                 "--init-box", "16,16"]
            )
        assert exc.value.code == 2


class TestExport:
    def test_embeddings_csv(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "export"
        code = main(
            ["export", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
             "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out)]
        )
        assert code == 0
        lines = (out / "embeddings.csv").read_text().splitlines()
        assert lines[0].startswith("video_id,frame_index,e0")
        assert len(lines) == 19
        report = json.loads((out / "export.json").read_text())
        assert report["rows"] == 18 and report["dim"] == 8


class TestConfigResolution:
    def test_file_overrides_defaults_flags_override_file(self, corpus_dir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"train": {"lr": 0.05, "iterations": 3, "memory_size": 12,
                                                  "num_videos": 3, "regime": "multi_frame",
                                                  "input_size": 16, "trunk": [[4, 3, 2], [8, 3, 2]],
                                                  "hidden_dim": 16, "embed_dim": 8}}))
        out = tmp_path / "run"
        code = main(
            ["train", "--manifest", str(corpus_dir / "manifest.jsonl"), "--out", str(out),
             "--config", str(cfg_path), "--lr", "0.07"]
        )
        assert code == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["lr"] == 0.07  # flag beats file
        assert echoed["iterations"] == 3  # file beats default
        assert echoed["checkpoint_every"] == 1000  # untouched default
        rows = (out / "metrics.csv").read_text().splitlines()[1:]
        assert all(row.split(",")[1] == "0.07" for row in rows)

    def test_unknown_config_key_fails(self, corpus_dir, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        code = main(
            ["train", "--manifest", str(corpus_dir / "manifest.jsonl"),
             "--out", str(tmp_path / "o"), "--config", str(cfg_path)]
        )
        assert code == 1


class TestThreadCap:
    def test_env_var_sets_blas_pools(self):
        env = {k: v for k, v in os.environ.items() if "NUM_THREADS" not in k}
        env["VINCE_THREADS"] = "1"
        result = subprocess.run(
            [sys.executable, "-c", "import vidnce.cli, os; print(os.environ['OMP_NUM_THREADS'])"],
            env=env, capture_output=True, text=True, timeout=120,
        )
        assert result.returncode == 0, result.stderr
        assert result.stdout.strip() == "1"
