"""Command-line pipeline: subcommands, config snapshots, and exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

CLI = [sys.executable, "-m", "esseg.cli"]


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(CLI + list(args), capture_output=True, text=True,
                          env=env, cwd=cwd)


def gen_small_dataset(tmp_path, name="train.essd", **overrides):
    args = {
        "--out": str(tmp_path / name),
        "--classes": "5",
        "--feature-dim": "8",
        "--pixels-per-image": "64",
        "--num-images": "4",
        "--noise-sigma": "0.08",
        "--seed": "11",
    }
    args.update(overrides)
    flat = [token for pair in args.items() for token in pair]
    proc = run_cli("gen-data", *flat)
    assert proc.returncode == 0, proc.stderr
    return tmp_path / name


FAST_TRAIN = ["--embed-dim", "4", "--num-neighbors", "3", "--epochs", "4",
              "--batch-size", "64", "--base-lr", "0.05", "--seed", "0"]


class TestGenData:
    def test_writes_file_and_sidecar(self, tmp_path):
        path = gen_small_dataset(tmp_path)
        assert path.exists()
        sidecar = json.loads((tmp_path / "train.essd.spec.json").read_text())
        assert sidecar["num_classes"] == 5
        assert sidecar["feature_dim"] == 8

    def test_stdout_summary(self, tmp_path):
        proc = run_cli("gen-data", "--out", str(tmp_path / "d.essd"),
                       "--classes", "3", "--feature-dim", "4")
        assert proc.returncode == 0
        payload = json.loads(proc.stdout)
        assert payload["num_classes"] == 3
        assert payload["num_pixels"] > 0

    def test_bad_argument_exits_2(self, tmp_path):
        proc = run_cli("gen-data", "--out", str(tmp_path / "d.essd"),
                       "--classes", "1", "--feature-dim", "4")
        assert proc.returncode == 2
        assert "error" in proc.stderr.lower()


class TestTrain:
    def test_full_run_artifacts(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "run"
        proc = run_cli("train", "--data", str(data), "--out", str(out),
                       *FAST_TRAIN)
        assert proc.returncode == 0, proc.stderr
        assert (out / "config.json").exists()
        assert (out / "metrics.json").exists()
        assert (out / "checkpoint" / "table.esse").exists()
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "iter,lr_main,lr_embed,cls_loss,reg_loss"
        assert len(lines) > 1
        summary = json.loads(proc.stdout)
        assert summary["train_metrics"]["pacc"] > 0.9
        assert summary["iterations"] == len(lines) - 1

    def test_config_snapshot_reproduces_run(self, tmp_path):
        """The resolved config written next to a run can be fed back in and
        must reproduce the run exactly."""
        data = gen_small_dataset(tmp_path)
        first = tmp_path / "first"
        run_cli("train", "--data", str(data), "--out", str(first),
                *FAST_TRAIN)
        second = tmp_path / "second"
        proc = run_cli("train", "--data", str(data), "--out", str(second),
                       "--config", str(first / "config.json"))
        assert proc.returncode == 0, proc.stderr
        assert (first / "loss.csv").read_text() == \
            (second / "loss.csv").read_text()
        assert json.loads((first / "config.json").read_text()) == \
            json.loads((second / "config.json").read_text())

    def test_flags_override_config_file(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        base = tmp_path / "base"
        run_cli("train", "--data", str(data), "--out", str(base), *FAST_TRAIN)
        tweaked = tmp_path / "tweaked"
        proc = run_cli("train", "--data", str(data), "--out", str(tweaked),
                       "--config", str(base / "config.json"),
                       "--temperature", "0.2")
        assert proc.returncode == 0, proc.stderr
        snap = json.loads((tweaked / "config.json").read_text())
        assert snap["temperature"] == 0.2

    def test_unknown_config_key_exits_2(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}))
        proc = run_cli("train", "--data", str(data),
                       "--out", str(tmp_path / "x"), "--config", str(cfg))
        assert proc.returncode == 2
        err = json.loads(proc.stderr)
        assert "learning_rate" in err["error"]["message"]

    def test_missing_data_exits_3(self, tmp_path):
        proc = run_cli("train", "--data", str(tmp_path / "nope.essd"),
                       "--out", str(tmp_path / "x"), *FAST_TRAIN)
        assert proc.returncode == 3

    def test_threads_env_var_lands_in_snapshot(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "envrun"
        proc = run_cli("train", "--data", str(data), "--out", str(out),
                       *FAST_TRAIN, env_extra={"ESS_THREADS": "3"})
        assert proc.returncode == 0, proc.stderr
        assert json.loads((out / "config.json").read_text())["n_threads"] == 3

    def test_threads_flag_beats_env(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "flagrun"
        proc = run_cli("train", "--data", str(data), "--out", str(out),
                       "--threads", "2", *FAST_TRAIN,
                       env_extra={"ESS_THREADS": "5"})
        assert proc.returncode == 0, proc.stderr
        assert json.loads((out / "config.json").read_text())["n_threads"] == 2


class TestEval:
    def test_matches_training_metrics(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "run"
        run_cli("train", "--data", str(data), "--out", str(out), *FAST_TRAIN)
        proc = run_cli("eval", "--checkpoint", str(out / "checkpoint"),
                       "--data", str(data))
        assert proc.returncode == 0, proc.stderr
        metrics = json.loads(proc.stdout)
        trained = json.loads((out / "metrics.json").read_text())
        assert metrics["pacc"] == pytest.approx(trained["pacc"], abs=1e-12)
        assert set(metrics) >= {"miou", "pacc", "fwiou"}

    def test_class_count_mismatch_exits_2(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        other = gen_small_dataset(tmp_path, name="other.essd",
                                  **{"--classes": "7"})
        out = tmp_path / "run"
        run_cli("train", "--data", str(data), "--out", str(out), *FAST_TRAIN)
        proc = run_cli("eval", "--checkpoint", str(out / "checkpoint"),
                       "--data", str(other))
        assert proc.returncode == 2

    def test_corrupted_data_exits_3(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "run"
        run_cli("train", "--data", str(data), "--out", str(out), *FAST_TRAIN)
        blob = bytearray(data.read_bytes())
        blob[:4] = b"EVIL"
        data.write_bytes(bytes(blob))
        proc = run_cli("eval", "--checkpoint", str(out / "checkpoint"),
                       "--data", str(data))
        assert proc.returncode == 3
        err = json.loads(proc.stderr)
        assert "error" in err


class TestBenchMemory:
    def test_single_report(self):
        proc = run_cli("bench-memory", "--height", "512", "--width", "512",
                       "--classes", "1284", "--dim", "12")
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["output_ratio"] == 107.0

    def test_sweep_output_bytes_constant(self):
        proc = run_cli("bench-memory", "--height", "64", "--width", "64",
                       "--classes", "10", "--dim", "16",
                       "--sweep-classes", "10,100,1000,10000")
        assert proc.returncode == 0, proc.stderr
        reports = json.loads(proc.stdout)["sweep"]
        assert len(reports) == 4
        ours = {r["ours_output_bytes"] for r in reports}
        assert len(ours) == 1
        baselines = [r["baseline_output_bytes"] for r in reports]
        assert baselines == sorted(baselines)
        assert baselines[0] < baselines[-1]


class TestAnalyzeEmbeddings:
    def _train_unnormalized(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "run"
        proc = run_cli("train", "--data", str(data), "--out", str(out),
                       "--no-normalize", *FAST_TRAIN)
        assert proc.returncode == 0, proc.stderr
        return out / "checkpoint" / "table.esse"

    def test_dendrogram(self, tmp_path):
        table = self._train_unnormalized(tmp_path)
        proc = run_cli("analyze-embeddings", "--embeddings", str(table))
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["num_classes"] == 5
        assert len(report["dendrogram"]) == 4
        heights = [m["height"] for m in report["dendrogram"]]
        assert heights == sorted(heights)

    def test_correlation_with_frequencies(self, tmp_path):
        table = self._train_unnormalized(tmp_path)
        freqs = tmp_path / "freqs.json"
        freqs.write_text(json.dumps([100, 80, 60, 40, 20]))
        proc = run_cli("analyze-embeddings", "--embeddings", str(table),
                       "--frequencies", str(freqs))
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert -1.0 <= report["norm_frequency_correlation"] <= 1.0

    def test_normalized_table_has_no_correlation_exits_4(self, tmp_path):
        data = gen_small_dataset(tmp_path)
        out = tmp_path / "normrun"
        run_cli("train", "--data", str(data), "--out", str(out), *FAST_TRAIN)
        freqs = tmp_path / "freqs.json"
        freqs.write_text(json.dumps([1, 2, 3, 4, 5]))
        proc = run_cli("analyze-embeddings", "--embeddings",
                       str(out / "checkpoint" / "table.esse"),
                       "--frequencies", str(freqs))
        assert proc.returncode == 4
        err = json.loads(proc.stderr)
        assert "error" in err

    def test_bad_magic_exits_3(self, tmp_path):
        bad = tmp_path / "bad.esse"
        bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        proc = run_cli("analyze-embeddings", "--embeddings", str(bad))
        assert proc.returncode == 3


class TestTopLevel:
    def test_no_subcommand_exits_2(self):
        proc = run_cli()
        assert proc.returncode == 2

    def test_unknown_flag_exits_2(self):
        proc = run_cli("bench-memory", "--height", "4", "--width", "4",
                       "--classes", "8", "--dim", "2", "--bogus", "1")
        assert proc.returncode == 2
