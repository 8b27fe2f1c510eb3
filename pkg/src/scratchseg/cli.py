"""Command-line surface: dataset generation, training, inference, evaluation.

One entry point with subcommands.  Every invocation resolves its settings
from built-in defaults, an optional JSON config file, and command-line flags
(in that order of precedence), records per-field provenance, and stores the
resolved configuration beside its output artifacts.  Exit codes: 0 success,
1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from . import supervision, texture
from .metrics import aggregate as aggregate_metrics
from .metrics import evaluate_pair, sliding_window_infer
from ._rng import derive_seed
from .data import (
    Dataset,
    GenConfig,
    load_dataset,
    generate_dataset,
    normalize_image,
    MANIFEST_NAME,
)
from .denoiser import DenoiserConfig, build_denoiser
from .diffusion import make_schedule, run_inference
from .supervision import sample_step_subsequence
from .training import TrainConfig, load_checkpoint, train

RUN_ROOT_ENV = "SCRATCHSEG_RUN_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as user errors (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_User(f"{self.prog}: {message}")


class SystemExit_User(Exception):
    pass


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return payload


def _resolve(defaults: dict, file_cfg: dict, flag_cfg: dict):
    """Merge defaults <- file <- flags; track where each value came from."""
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config file fields: {sorted(unknown)}")
    values = {}
    provenance = {}
    for key, default in defaults.items():
        if key in flag_cfg and flag_cfg[key] is not None:
            values[key] = flag_cfg[key]
            provenance[key] = "flag"
        elif key in file_cfg:
            values[key] = file_cfg[key]
            provenance[key] = "file"
        else:
            values[key] = default
            provenance[key] = "default"
    return values, provenance


def _config_hash_seed(values: dict) -> int:
    payload = json.dumps(values, sort_keys=True, default=str)
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:4], "big")


def _write_run_config(out_dir: Path, command: str, values: dict, provenance: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "values": values,
        "provenance": provenance,
    }
    (out_dir / "run_config.json").write_text(json.dumps(payload, indent=2, default=str))


def _default_run_dir(seed: int) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{stamp}-seed{seed}"
    suffix = 2
    while candidate.exists():
        candidate = root / f"{stamp}-seed{seed}-{suffix}"
        suffix += 1
    return candidate


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------

_PRESETS = {
    "smoke": {"labeled": 4, "unlabeled": 8, "val": 2, "test": 2, "size": (64, 64)},
    "full": {"labeled": 1082, "unlabeled": 2240, "val": 154, "test": 154, "size": (256, 256)},
}


def cmd_generate(args) -> int:
    defaults = {f.name: getattr(GenConfig(), f.name) for f in dataclasses.fields(GenConfig)}
    defaults.update({"labeled": 8, "unlabeled": 16, "val": 4, "test": 4})
    file_cfg = _load_config_file(args.config) if args.config else {}
    if "size" in file_cfg:
        file_cfg["size"] = tuple(file_cfg["size"])

    flag_cfg = {}
    if args.preset:
        preset = dict(_PRESETS[args.preset])
        flag_cfg.update(preset)
    for key in ("labeled", "unlabeled", "val", "test", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            flag_cfg[key] = value
    if args.size:
        try:
            h, w = (int(part) for part in args.size.lower().split("x"))
        except ValueError:
            raise ValueError(f"--size must look like 64x64, got {args.size!r}")
        flag_cfg["size"] = (h, w)

    values, provenance = _resolve(defaults, file_cfg, flag_cfg)
    if provenance["seed"] == "default":
        values["seed"] = _config_hash_seed(values)
        provenance["seed"] = "derived:config-hash"

    counts = {
        "labeled_train": values.pop("labeled"),
        "unlabeled_train": values.pop("unlabeled"),
        "val": values.pop("val"),
        "test": values.pop("test"),
    }
    for split in counts:
        provenance[split] = provenance.pop(
            {"labeled_train": "labeled", "unlabeled_train": "unlabeled", "val": "val", "test": "test"}[split]
        )
    gen_cfg = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})

    out = Path(args.out)
    manifests = generate_dataset(gen_cfg, counts, out)
    _write_run_config(out, "generate-data", {**values, **counts, "size": list(gen_cfg.size)}, provenance)
    total = sum(len(m.entries) for m in manifests.values())
    print(f"wrote {total} samples across {len(manifests)} splits to {out}")
    for split, manifest in manifests.items():
        print(f"  {split}: {len(manifest.entries)} samples (seed {gen_cfg.seed})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAG_MAP = {
    "m": "rollout_steps",
    "n": "rollout_chains",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "unlabeled_batch_size": "unlabeled_batch_size",
    "epochs": "epochs",
    "seed": "seed",
    "max_steps": "max_steps",
    "val_steps": "val_steps",
    "val_max_images": "val_max_images",
    "checkpoint_every": "checkpoint_every",
    "mask_mode": "mask_mode",
    "noise_mode": "noise_mode",
    "total_steps": "total_steps",
}


def cmd_train(args) -> int:
    defaults = TrainConfig().to_dict()
    file_cfg = _load_config_file(args.config) if args.config else {}
    flag_cfg = {}
    for flag, key in _TRAIN_FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            flag_cfg[key] = value
    values, provenance = _resolve(defaults, file_cfg, flag_cfg)
    if args.seed is None and "seed" not in file_cfg:
        values["seed"] = _config_hash_seed(values)
        provenance["seed"] = "derived:config-hash"

    data_root = Path(args.data)
    labeled_dir = data_root / "labeled_train"
    if not (labeled_dir / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"no labeled_train manifest under {data_root}")
    labeled = load_dataset(labeled_dir)

    unlabeled = None
    unlabeled_manifest = data_root / "unlabeled_train" / MANIFEST_NAME
    if args.supervised_only:
        if "unsup_per_sup" in file_cfg and file_cfg["unsup_per_sup"]:
            raise ValueError(
                "config conflict: --supervised-only (flag) contradicts "
                f"unsup_per_sup={file_cfg['unsup_per_sup']} (file {args.config})"
            )
    elif unlabeled_manifest.exists():
        unlabeled = load_dataset(unlabeled_manifest)

    validation = None
    val_manifest = data_root / "val" / MANIFEST_NAME
    if val_manifest.exists():
        validation = load_dataset(val_manifest)

    try:
        config = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        sources = {k: v for k, v in provenance.items() if v != "default"}
        raise ValueError(f"invalid training config: {exc} [non-default sources: {sources}]")

    out_dir = Path(args.out) if args.out else _default_run_dir(config.seed)
    _write_run_config(out_dir, "train", config.to_dict(), provenance)
    record, log_path = train(
        config,
        labeled,
        unlabeled=unlabeled,
        validation=validation,
        out_dir=out_dir,
        resume_from=args.resume,
    )
    print(f"training complete: {record.progress['global_step']} steps")
    print(f"metrics log: {log_path}")
    print(f"checkpoints: {out_dir / 'checkpoints'}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _load_denoiser(checkpoint_dir):
    record = load_checkpoint(checkpoint_dir)
    denoiser = build_denoiser(record.config.denoiser, derive_seed(record.config.seed, "init"))
    denoiser.load_state_dict(record.model_state)
    denoiser.eval()
    return denoiser, record.config


def cmd_infer(args) -> int:
    denoiser, config = _load_denoiser(args.checkpoint)
    schedule = make_schedule(config.total_steps, config.schedule_kind)

    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    raw = np.asarray(Image.open(image_path).convert("L"), dtype=np.uint8)
    norm = normalize_image(raw)
    h, w = norm.shape

    seed = args.seed if args.seed is not None else derive_seed(config.seed, "infer", image_path.name)
    window = args.window or min(h, w)
    stride = args.stride or window
    if args.steps is None or args.steps >= schedule.num_steps:
        steps = list(range(schedule.num_steps, 0, -1))
    else:
        steps = list(
            sample_step_subsequence(schedule.num_steps, args.steps, derive_seed(seed, "steps"))
        )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask, prob = sliding_window_infer(
        norm,
        denoiser,
        schedule,
        window=window,
        stride=stride,
        seed=seed,
        steps=steps,
        mask_threshold=args.threshold,
        noise_mode=config.noise_mode,
    )

    stem = image_path.stem
    mask_img = Image.fromarray(mask.astype(np.uint8), mode="P")
    mask_img.putpalette([0, 0, 0, 255, 0, 0] + [0] * (768 - 6))
    mask_img.save(out_dir / f"{stem}_mask.png")
    prob16 = (np.clip(prob, 0.0, 1.0) * 65535.0).round().astype(np.uint16)
    Image.fromarray(prob16).save(out_dir / f"{stem}_prob.png")

    if args.trace:
        if (window, window) != (h, w):
            raise ValueError(
                "--trace requires single-window inference (window spanning the image)"
            )
        result = run_inference(norm, denoiser, schedule, steps, seed, noise_mode=config.noise_mode)
        series = [np.zeros((h, w), dtype=np.uint8)]
        for estimate in result.x0_trace:
            prob_view = (estimate.numpy() + 1.0) / 2.0
            series.append(texture.binarize(prob_view, args.threshold))
        supervision.write_sequence_archive(
            out_dir / f"{stem}_trace", steps, [series], mask_threshold=args.threshold
        )
        print(f"trace archive: {out_dir / (stem + '_trace')}")

    _write_run_config(
        out_dir,
        "infer",
        {
            "checkpoint": str(args.checkpoint),
            "image": str(image_path),
            "window": window,
            "stride": stride,
            "steps": len(steps),
            "seed": seed,
            "threshold": args.threshold,
        },
        {"seed": "flag" if args.seed is not None else "derived:checkpoint"},
    )
    print(f"mask: {out_dir / (stem + '_mask.png')}")
    print(f"probability map: {out_dir / (stem + '_prob.png')}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise NotADirectoryError(f"prediction directory not found: {pred_dir}")
    dataset = load_dataset(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    pairs = []
    failures = []
    for index in range(len(dataset)):
        rec = dataset[index]
        image_rel = dataset.manifest.entries[index][0]
        name = Path(image_rel).name
        pred_path = pred_dir / name
        if not pred_path.exists():
            failures.append(f"{name}: prediction file missing ({pred_path})")
            continue
        pred = np.asarray(Image.open(pred_path), dtype=np.uint8)
        if rec.classes is None:
            failures.append(f"{name}: manifest entry has no ground-truth mask")
            continue
        if pred.shape != rec.classes.shape:
            failures.append(
                f"{name}: prediction shape {pred.shape} != ground truth {rec.classes.shape}"
            )
            continue
        report = evaluate_pair(pred > 0, rec.classes)
        pairs.append((pred > 0, rec.classes))
        rows.append((name, report))

    header = "image,iou,dice,accuracy,shallow_recall,deep_recall"
    lines = [header]
    for name, report in rows:
        lines.append(
            f"{name},{report.iou:.6f},{report.dice:.6f},{report.accuracy:.6f},"
            f"{report.shallow_recall:.6f},{report.deep_recall:.6f}"
        )
    (out_dir / "per_image.csv").write_text("\n".join(lines) + "\n")

    if pairs:
        overall = aggregate_metrics(pairs)
        (out_dir / "aggregate.json").write_text(json.dumps(overall.as_dict(), indent=2))
        print(
            "aggregate: "
            f"iou={overall.iou:.4f} dice={overall.dice:.4f} accuracy={overall.accuracy:.4f} "
            f"shallow_recall={overall.shallow_recall:.4f} deep_recall={overall.deep_recall:.4f}"
        )
    _write_run_config(
        out_dir,
        "eval",
        {"pred": str(pred_dir), "manifest": str(args.manifest)},
        {},
    )
    if failures:
        for failure in failures:
            print(f"error: {failure}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# texent
# ---------------------------------------------------------------------------


def cmd_texent(args) -> int:
    steps, trajectories = supervision.read_sequence_archive(args.archive)
    sequences = []
    for series in trajectories:
        sequences.append(
            np.asarray(
                [
                    texture.map_entropy(np.minimum(m, 1), num_classes=2, window=args.window)
                    for m in series
                ]
            )
        )
    lam = texture.consistency_feature(sequences, args.cutoff)

    report = {
        "steps": steps,
        "highfreq_cutoff": args.cutoff,
        "window": args.window,
        "consistency": lam,
        "entropy_series": [[float(e) for e in seq] for seq in sequences],
    }
    for i, seq in enumerate(sequences):
        formatted = " ".join(f"{e:.4f}" for e in seq)
        print(f"trajectory {i}: E_T = [{formatted}]")
    print(f"consistency feature: {lam:.6f}")
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2))
        print(f"report: {out_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scratchseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset", parents=[])
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", choices=sorted(_PRESETS), help="named size/count bundle")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--labeled", type=int, help="labeled training samples")
    p.add_argument("--unlabeled", type=int, help="unlabeled training samples")
    p.add_argument("--val", type=int, help="validation samples")
    p.add_argument("--test", type=int, help="test samples")
    p.add_argument("--size", help="image size as HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, help="generator seed")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--data", required=True, help="dataset root from generate-data")
    p.add_argument("--out", help="run directory (default: timestamped under runs/)")
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--unlabeled-batch-size", dest="unlabeled_batch_size", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--m", type=int, help="shortened subsequence length")
    p.add_argument("--n", type=int, help="resampled trajectories per image")
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--val-steps", dest="val_steps", type=int)
    p.add_argument("--val-max-images", dest="val_max_images", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--mask-mode", dest="mask_mode", choices=("consistency", "literal"))
    p.add_argument("--noise-mode", dest="noise_mode", choices=("gaussian", "literal"))
    p.add_argument("--supervised-only", action="store_true")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, help="tile size (default: whole image)")
    p.add_argument("--stride", type=int, help="tile stride (default: window)")
    p.add_argument("--steps", type=int, help="shortened chain length (default: full)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--trace", action="store_true", help="also write the estimate-sequence archive")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a labeled manifest")
    p.add_argument("--pred", required=True, help="directory of predicted mask PNGs")
    p.add_argument("--manifest", required=True, help="labeled split manifest (or its directory)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("texent", help="texture-entropy report for a mask-sequence archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--cutoff", type=int, default=9, help="high-frequency bin threshold")
    p.add_argument("--window", type=int, default=3, help="pattern window size")
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(handler=cmd_texent)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit_User as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        ValueError,
        FileNotFoundError,
        FileExistsError,
        NotADirectoryError,
        IsADirectoryError,
        PermissionError,
        KeyError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
