"""End-to-end command-line tests: every subcommand plus the exit-code contract."""

import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import scratchseg.cli as cli
from scratchseg.cli import main
from scratchseg.supervision import ARCHIVE_MANIFEST, write_sequence_archive


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A tiny generated dataset with scratch content guaranteed on every image."""
    base = tmp_path_factory.mktemp("cli-data")
    gen_cfg = base / "gen.json"
    gen_cfg.write_text(json.dumps({"shallow_count": [1, 2], "deep_count": [1, 2]}))
    root = base / "set"
    rc = main(
        [
            "generate-data",
            "--out", str(root),
            "--config", str(gen_cfg),
            "--size", "16x16",
            "--labeled", "3",
            "--unlabeled", "2",
            "--val", "1",
            "--test", "1",
            "--seed", "5",
        ]
    )
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def train_cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli-cfg") / "train.json"
    path.write_text(
        json.dumps(
            {
                "denoiser": {
                    "base_channels": 8,
                    "depth": 2,
                    "channel_mults": [1, 2],
                    "time_embed_dim": 16,
                },
                "highfreq_cutoff": 1,
                "confidence_threshold": 0.0,
                "dispersion_threshold": 1.0,
                "batch_size": 2,
                "val_steps": 2,
                "val_max_images": 1,
            }
        )
    )
    return path


def train_argv(dataset, train_cfg_file, out_dir, *extra):
    return [
        "train",
        "--data", str(dataset),
        "--out", str(out_dir),
        "--config", str(train_cfg_file),
        "--epochs", "1",
        "--total-steps", "4",
        "--m", "2",
        "--n", "2",
        "--seed", "9",
        *extra,
    ]


@pytest.fixture(scope="module")
def trained_run(dataset, train_cfg_file, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("cli-train") / "run"
    rc = main(train_argv(dataset, train_cfg_file, out_dir))
    assert rc == 0
    return out_dir


class TestGenerate:
    def test_layout_and_counts(self, dataset):
        for split, count in (
            ("labeled_train", 3), ("unlabeled_train", 2), ("val", 1), ("test", 1)
        ):
            images = sorted((dataset / split / "images").glob("*.png"))
            assert len(images) == count, split
        assert (dataset / "labeled_train/masks/00000.png").exists()
        assert (dataset / "unlabeled_train/oracle_masks/00000.png").exists()
        assert not (dataset / "unlabeled_train/masks").exists()

    def test_run_config_provenance(self, dataset):
        payload = json.loads((dataset / "run_config.json").read_text())
        assert payload["command"] == "generate-data"
        assert payload["provenance"]["seed"] == "flag"
        assert payload["provenance"]["shallow_count"] == "file"
        assert payload["values"]["labeled_train"] == 3

    def test_seed_derived_from_config_when_unset(self, tmp_path):
        rc = main(["generate-data", "--out", str(tmp_path / "d"), "--size", "16x16",
                   "--labeled", "1", "--unlabeled", "1", "--val", "1", "--test", "1"])
        assert rc == 0
        payload = json.loads((tmp_path / "d/run_config.json").read_text())
        assert payload["provenance"]["seed"] == "derived:config-hash"
        assert isinstance(payload["values"]["seed"], int)

    def test_smoke_preset_counts(self, tmp_path, capsys):
        rc = main(["generate-data", "--out", str(tmp_path / "d"), "--preset", "smoke",
                   "--size", "16x16", "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "wrote 16 samples across 4 splits" in out

    def test_existing_split_refused(self, dataset, capsys):
        rc = main(["generate-data", "--out", str(dataset), "--size", "16x16", "--seed", "5"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_size_string(self, tmp_path, capsys):
        rc = main(["generate-data", "--out", str(tmp_path / "d"), "--size", "large"])
        assert rc == 1
        assert "64x64" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained_run):
        assert (trained_run / "metrics.csv").exists()
        assert (trained_run / "checkpoints/last/model.pt").exists()
        payload = json.loads((trained_run / "run_config.json").read_text())
        assert payload["values"]["rollout_steps"] == 2
        assert payload["values"]["rollout_chains"] == 2
        assert payload["provenance"]["rollout_steps"] == "flag"
        assert payload["provenance"]["highfreq_cutoff"] == "file"

    def test_metrics_include_val_and_unsup(self, trained_run):
        with open(trained_run / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert any(r["loss_u"] != "" for r in rows)
        assert any(r["val_iou"] != "" for r in rows)

    def test_deterministic_metrics(self, dataset, train_cfg_file, trained_run, tmp_path):
        rc = main(train_argv(dataset, train_cfg_file, tmp_path / "again"))
        assert rc == 0

        def stripped(path):
            with open(path / "metrics.csv") as fh:
                rows = list(csv.DictReader(fh))
            return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]

        assert stripped(tmp_path / "again") == stripped(trained_run)

    def test_supervised_only_skips_unlabeled(self, dataset, train_cfg_file, tmp_path):
        rc = main(train_argv(dataset, train_cfg_file, tmp_path / "sup", "--supervised-only"))
        assert rc == 0
        with open(tmp_path / "sup/metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["loss_u"] == "" for r in rows)

    def test_supervised_only_conflicts_with_file_field(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "conflict.json"
        cfg.write_text(json.dumps({"unsup_per_sup": 2, "highfreq_cutoff": 1}))
        rc = main(["train", "--data", str(dataset), "--out", str(tmp_path / "run"),
                   "--config", str(cfg), "--m", "2", "--n", "2", "--total-steps", "4",
                   "--epochs", "1", "--supervised-only"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "config conflict" in err and "unsup_per_sup" in err

    def test_invalid_config_names_sources(self, dataset, train_cfg_file, tmp_path, capsys):
        rc = main(train_argv(dataset, train_cfg_file, tmp_path / "run", "--m", "9"))
        assert rc == 1
        err = capsys.readouterr().err
        assert "non-default sources" in err and "rollout_steps" in err

    def test_unknown_file_field_rejected(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "typo.json"
        cfg.write_text(json.dumps({"learning_rte": 0.1}))
        rc = main(["train", "--data", str(dataset), "--out", str(tmp_path / "run"),
                   "--config", str(cfg)])
        assert rc == 1
        assert "learning_rte" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nowhere")])
        assert rc == 1
        assert "labeled_train" in capsys.readouterr().err


class TestInfer:
    def test_mask_and_prob_written(self, dataset, trained_run, tmp_path):
        image = dataset / "val/images/00000.png"
        rc = main(["infer", "--checkpoint", str(trained_run / "checkpoints/last"),
                   "--image", str(image), "--out", str(tmp_path / "pred"),
                   "--steps", "2", "--seed", "3"])
        assert rc == 0
        mask = np.asarray(Image.open(tmp_path / "pred/00000_mask.png"))
        prob = np.asarray(Image.open(tmp_path / "pred/00000_prob.png"))
        assert mask.shape == (16, 16) and set(np.unique(mask)) <= {0, 1}
        assert prob.dtype == np.uint16

    def test_trace_archive_has_prior_plus_each_step(self, dataset, trained_run, tmp_path):
        image = dataset / "val/images/00000.png"
        rc = main(["infer", "--checkpoint", str(trained_run / "checkpoints/last"),
                   "--image", str(image), "--out", str(tmp_path / "pred"),
                   "--steps", "2", "--seed", "3", "--trace"])
        assert rc == 0
        trace_dir = tmp_path / "pred/00000_trace"
        assert (trace_dir / ARCHIVE_MANIFEST).exists()
        assert len(sorted(trace_dir.glob("traj00_pos*.png"))) == 3

    def test_trace_with_tiling_refused(self, dataset, trained_run, tmp_path, capsys):
        image = dataset / "val/images/00000.png"
        rc = main(["infer", "--checkpoint", str(trained_run / "checkpoints/last"),
                   "--image", str(image), "--out", str(tmp_path / "pred"),
                   "--window", "8", "--steps", "2", "--trace"])
        assert rc == 1
        assert "single-window" in capsys.readouterr().err

    def test_same_seed_reproduces(self, dataset, trained_run, tmp_path):
        image = dataset / "val/images/00000.png"
        for name in ("a", "b"):
            rc = main(["infer", "--checkpoint", str(trained_run / "checkpoints/last"),
                       "--image", str(image), "--out", str(tmp_path / name),
                       "--steps", "2", "--seed", "11"])
            assert rc == 0
        first = (tmp_path / "a/00000_prob.png").read_bytes()
        second = (tmp_path / "b/00000_prob.png").read_bytes()
        assert first == second

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        rc = main(["infer", "--checkpoint", str(tmp_path / "nope"),
                   "--image", str(dataset / "val/images/00000.png"),
                   "--out", str(tmp_path / "pred")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_perfect_predictions_score_one(self, dataset, tmp_path, capsys):
        preds = tmp_path / "preds"
        preds.mkdir()
        for mask_path in (dataset / "val/masks").glob("*.png"):
            shutil.copy(mask_path, preds / mask_path.name)
        rc = main(["eval", "--pred", str(preds), "--manifest", str(dataset / "val"),
                   "--out", str(tmp_path / "scores")])
        assert rc == 0
        agg = json.loads((tmp_path / "scores/aggregate.json").read_text())
        for key in ("iou", "dice", "accuracy", "shallow_recall", "deep_recall"):
            assert agg[key] == 1.0, key
        lines = (tmp_path / "scores/per_image.csv").read_text().splitlines()
        assert lines[0] == "image,iou,dice,accuracy,shallow_recall,deep_recall"
        assert lines[1].startswith("00000.png,1.000000,1.000000")
        assert "aggregate: iou=1.0000" in capsys.readouterr().out

    def test_missing_prediction_fails(self, dataset, tmp_path, capsys):
        preds = tmp_path / "empty"
        preds.mkdir()
        rc = main(["eval", "--pred", str(preds), "--manifest", str(dataset / "val"),
                   "--out", str(tmp_path / "scores")])
        assert rc == 1
        assert "prediction file missing" in capsys.readouterr().err

    def test_unlabeled_manifest_fails(self, dataset, tmp_path, capsys):
        preds = tmp_path / "preds"
        preds.mkdir()
        for image_path in (dataset / "unlabeled_train/images").glob("*.png"):
            shutil.copy(image_path, preds / image_path.name)
        rc = main(["eval", "--pred", str(preds),
                   "--manifest", str(dataset / "unlabeled_train"),
                   "--out", str(tmp_path / "scores")])
        assert rc == 1
        assert "no ground-truth mask" in capsys.readouterr().err


class TestTexent:
    def test_constant_archive_reports_zero(self, tmp_path, capsys):
        series = [np.zeros((8, 8), np.uint8)] * 3
        write_sequence_archive(tmp_path / "arc", [2, 1], [series])
        rc = main(["texent", "--archive", str(tmp_path / "arc"), "--cutoff", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "trajectory 0: E_T = [0.0000 0.0000 0.0000]" in out
        assert "consistency feature: 0.000000" in out

    def test_series_length_tracks_archive(self, tmp_path):
        gen = np.random.default_rng(0)
        steps = list(range(12, 0, -1))
        series = [(gen.random((8, 8)) > 0.5).astype(np.uint8) for _ in range(13)]
        write_sequence_archive(tmp_path / "arc", steps, [series])
        report_path = tmp_path / "report.json"
        rc = main(["texent", "--archive", str(tmp_path / "arc"),
                   "--cutoff", "9", "--out", str(report_path)])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert len(report["entropy_series"][0]) == 13
        assert 0.0 <= report["consistency"] <= 1.0

    def test_malformed_manifest_names_line(self, tmp_path, capsys):
        series = [np.zeros((8, 8), np.uint8)] * 3
        write_sequence_archive(tmp_path / "arc", [2, 1], [series])
        manifest = tmp_path / "arc" / ARCHIVE_MANIFEST
        lines = manifest.read_text().splitlines()
        lines[2] = "{broken"
        manifest.write_text("\n".join(lines) + "\n")
        rc = main(["texent", "--archive", str(tmp_path / "arc")])
        assert rc == 1
        assert "line 3" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["bogus"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert main(["infer"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_internal_errors_exit_two(self, monkeypatch, capsys):
        def boom(args):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(cli, "cmd_texent", boom)
        assert main(["texent", "--archive", "anywhere"]) == 2
        assert "internal error" in capsys.readouterr().err
