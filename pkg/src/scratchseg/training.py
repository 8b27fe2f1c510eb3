"""Training loop: coupled supervised steps, unsupervised steps, checkpoints.

Supervised steps run the denoiser twice per draw — once with a zero prior,
once with the clean-mask estimate implied by the first pass — and penalize
both passes against the true noise, with scratch pixels weighted up.
Unsupervised steps roll out resampled shortened trajectories on an unlabeled
image, build a pseudo-label and loss mask from them, and apply the
consistency loss through a gradient-carrying re-evaluation of the recorded
states.

All randomness is drawn from named streams keyed by (seed, purpose, epoch,
step), so a resumed run continues exactly as the uninterrupted one would.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ._rng import derive_seed, stream
from .data import SampleRecord, augment, normalize_image
from .denoiser import Denoiser, DenoiserConfig, build_denoiser, predict_noise
from .diffusion import NoiseSchedule, estimate_x0, forward_sample, make_schedule, run_inference
from .metrics import MetricReport, aggregate
from .supervision import build_sequences, evaluate_sequences, unsupervised_loss

__all__ = [
    "TrainConfig",
    "CheckpointRecord",
    "MetricsLog",
    "pixel_weights",
    "supervised_step",
    "unsupervised_step",
    "validate",
    "predict_probability",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training procedure, serializable to JSON."""

    total_steps: int = 100
    rollout_steps: int = 12
    rollout_chains: int = 2
    mask_threshold: float = 0.5
    confidence_threshold: float = 0.8
    dispersion_threshold: float = 0.05
    highfreq_cutoff: int = 9
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 4
    unlabeled_batch_size: int = 1
    epochs: int = 10
    scratch_weight: float = 5.0
    seed: int = 0
    mask_mode: str = "consistency"
    noise_mode: str = "gaussian"
    texture_window: int = 3
    augment: bool = True
    unsup_per_sup: int = 1
    schedule_kind: str = "linear"
    checkpoint_every: int = 0
    val_every: int = 1
    val_steps: Optional[int] = None
    val_max_images: Optional[int] = None
    early_stop_patience: Optional[int] = None
    max_steps: Optional[int] = None
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        for name in ("mask_threshold", "confidence_threshold", "dispersion_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if int(self.highfreq_cutoff) != self.highfreq_cutoff or not (
            0 <= self.highfreq_cutoff < self.rollout_steps + 1
        ):
            raise ValueError(
                f"highfreq_cutoff must be an integer in [0, {self.rollout_steps}], "
                f"got {self.highfreq_cutoff}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.total_steps < 1 or self.rollout_steps < 1 or self.rollout_chains < 1:
            raise ValueError("total_steps, rollout_steps, and rollout_chains must be >= 1")
        if self.rollout_steps > self.total_steps:
            raise ValueError(
                f"rollout_steps ({self.rollout_steps}) cannot exceed total_steps "
                f"({self.total_steps})"
            )
        if self.batch_size < 1 or self.unlabeled_batch_size < 1 or self.epochs < 1:
            raise ValueError("batch sizes and epochs must be >= 1")
        if self.mask_mode not in ("consistency", "literal"):
            raise ValueError(f"mask_mode must be 'consistency' or 'literal', got {self.mask_mode!r}")
        if self.noise_mode not in ("gaussian", "literal"):
            raise ValueError(f"noise_mode must be 'gaussian' or 'literal', got {self.noise_mode!r}")
        if isinstance(self.denoiser, dict):
            object.__setattr__(self, "denoiser", DenoiserConfig(**self.denoiser))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if isinstance(payload.get("denoiser"), dict):
            payload["denoiser"] = DenoiserConfig(**payload["denoiser"])
        return TrainConfig(**payload)


def pixel_weights(classes: np.ndarray, scratch_weight: float) -> torch.Tensor:
    """Per-pixel loss weights: ``scratch_weight`` on scratch pixels, 1 elsewhere."""
    arr = np.asarray(classes)
    if not np.isin(arr, (0, 1, 2)).all():
        raise ValueError("label values must lie in {0, 1, 2}")
    scratch = torch.as_tensor(arr >= 1, dtype=torch.float64)
    return 1.0 + (float(scratch_weight) - 1.0) * scratch


def _weighted_mse(target: torch.Tensor, pred: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (weights * (target - pred.to(torch.float64)) ** 2).mean()


def supervised_step(
    batch: Sequence[SampleRecord],
    denoiser,
    schedule: NoiseSchedule,
    optimizer,
    scratch_weight: float,
    rng,
) -> float:
    """One coupled two-pass optimization step on a labeled batch.

    Both passes share the same noisy states; the second pass's prior is the
    clean-mask estimate implied by the first pass's prediction and stays
    inside the computation graph.  The optimizer is applied once, jointly.
    """
    if len(batch) == 0:
        raise ValueError("supervised batch must be non-empty")
    gen = np.random.default_rng(rng)
    images = torch.stack(
        [torch.as_tensor(np.asarray(rec.image, dtype=np.float32))[None] for rec in batch]
    )
    weights = torch.stack([pixel_weights(rec.classes, scratch_weight) for rec in batch])
    signal = 2.0 * torch.stack(
        [torch.as_tensor(np.asarray(rec.classes) >= 1, dtype=torch.float64) for rec in batch]
    ) - 1.0

    b = signal.shape[0]
    t = gen.integers(1, schedule.num_steps + 1, size=b)
    eps = torch.from_numpy(gen.standard_normal(signal.shape))
    x_t = forward_sample(signal, t, eps, schedule)

    zero_prior = torch.zeros_like(x_t)
    eps1 = predict_noise(denoiser, x_t, t, images, zero_prior)
    prior = estimate_x0(x_t, t, eps1, schedule)
    eps2 = predict_noise(denoiser, x_t, t, images, prior)

    loss = _weighted_mse(eps, eps1, weights) + _weighted_mse(eps, eps2, weights)
    value = float(loss.item())
    if loss.requires_grad and value != 0.0:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return value


def unsupervised_step(
    images,
    denoiser,
    schedule: NoiseSchedule,
    config: TrainConfig,
    optimizer,
    rng,
):
    """One consistency-loss step over a batch of unlabeled images.

    Rollouts are frozen; gradients come only from re-evaluating the noise
    predictions at the recorded (state, step, prior) triples.  Returns the
    batch loss and the per-image consistency features.  When every loss mask
    is empty the step is a strict no-op on parameters.
    """
    if len(images) == 0:
        raise ValueError("unsupervised batch must be non-empty")
    gen = np.random.default_rng(rng)
    was_training = getattr(denoiser, "training", False)
    if isinstance(denoiser, torch.nn.Module):
        denoiser.eval()
    try:
        losses = []
        lambdas = []
        for image in images:
            arr = np.asarray(image.image if isinstance(image, SampleRecord) else image)
            seq_set = build_sequences(
                arr,
                denoiser,
                schedule,
                config.rollout_steps,
                config.rollout_chains,
                gen,
                noise_mode=config.noise_mode,
            )
            sig = evaluate_sequences(
                seq_set,
                mask_threshold=config.mask_threshold,
                confidence_threshold=config.confidence_threshold,
                dispersion_threshold=config.dispersion_threshold,
                highfreq_cutoff=config.highfreq_cutoff,
                mode=config.mask_mode,
                window=config.texture_window,
            )
            lambdas.append(sig.consistency)
            if float(sig.loss_mask.sum()) == 0.0:
                continue
            n, m = seq_set.num_trajectories, seq_set.num_positions
            h, w = seq_set.noisy.shape[-2:]
            flat_states = seq_set.noisy.reshape(n * m, h, w)
            flat_priors = seq_set.prior_inputs().reshape(n * m, h, w)
            flat_steps = np.tile(np.asarray(seq_set.steps), n)
            eps_re = predict_noise(denoiser, flat_states, flat_steps, arr, flat_priors)
            losses.append(
                unsupervised_loss(
                    seq_set,
                    sig.pseudo_label,
                    sig.loss_mask,
                    schedule,
                    eps_hat=eps_re.reshape(n, m, h, w),
                )
            )
        if not losses:
            return 0.0, lambdas
        total = sum(losses) / len(images)
        value = float(total.item())
        if torch.is_tensor(total) and total.requires_grad and value != 0.0:
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
        return value, lambdas
    finally:
        if isinstance(denoiser, torch.nn.Module) and was_training:
            denoiser.train()


def predict_probability(
    image,
    denoiser,
    schedule: NoiseSchedule,
    steps: Sequence[int],
    seed,
    noise_mode: str = "gaussian",
) -> np.ndarray:
    """Scratch probability map from one denoising chain (final refined estimate)."""
    result = run_inference(image, denoiser, schedule, steps, seed, noise_mode=noise_mode)
    return ((result.x0_trace[-1] + 1.0) / 2.0).numpy()


def _val_steps(schedule: NoiseSchedule, num: Optional[int]) -> list:
    if num is None or num >= schedule.num_steps:
        return list(range(schedule.num_steps, 0, -1))
    picks = np.unique(np.linspace(schedule.num_steps, 1, num).round().astype(int))[::-1]
    return [int(s) for s in picks]


def validate(
    denoiser,
    schedule: NoiseSchedule,
    samples,
    config: TrainConfig,
    seed: int,
) -> MetricReport:
    """Aggregate metrics over a validation set using seeded inference chains."""
    was_training = getattr(denoiser, "training", False)
    if isinstance(denoiser, torch.nn.Module):
        denoiser.eval()
    try:
        steps = _val_steps(schedule, config.val_steps)
        pairs = []
        for idx, rec in enumerate(samples):
            if rec.classes is None:
                raise ValueError("validation samples must be labeled")
            prob = predict_probability(
                normalize_image(rec.image),
                denoiser,
                schedule,
                steps,
                derive_seed(seed, "val", idx),
                noise_mode=config.noise_mode,
            )
            pairs.append(((prob >= config.mask_threshold).astype(np.uint8), rec.classes))
        return aggregate(pairs)
    finally:
        if isinstance(denoiser, torch.nn.Module) and was_training:
            denoiser.train()


class MetricsLog:
    """Append-only CSV log; one row per optimization step or validation pass."""

    COLUMNS = (
        "step",
        "epoch",
        "loss_l",
        "loss_u",
        "lambda_mean",
        "val_iou",
        "val_dice",
        "val_accuracy",
        "val_shallow_recall",
        "val_deep_recall",
        "wall_time",
    )

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume and self.path.exists():
            self._fh = self.path.open("a")
        else:
            self._fh = self.path.open("w")
            self._fh.write(",".join(self.COLUMNS) + "\n")
            self._fh.flush()

    def write(self, **fields) -> None:
        unknown = set(fields) - set(self.COLUMNS)
        if unknown:
            raise ValueError(f"unknown metrics columns: {sorted(unknown)}")
        row = []
        for col in self.COLUMNS:
            value = fields.get(col)
            if value is None:
                row.append("")
            elif isinstance(value, float):
                row.append(repr(value))
            else:
                row.append(str(value))
        self._fh.write(",".join(row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class CheckpointRecord:
    """Everything needed to resume: weights, optimizer, config, progress."""

    config: TrainConfig
    model_state: dict
    optimizer_state: dict
    progress: dict


def save_checkpoint(directory, denoiser, optimizer, config: TrainConfig, progress: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(denoiser.state_dict(), directory / "model.pt")
    torch.save(optimizer.state_dict(), directory / "optimizer.pt")
    (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    (directory / "progress.json").write_text(json.dumps(dict(progress), indent=2))
    return directory


def load_checkpoint(directory) -> CheckpointRecord:
    directory = Path(directory)
    if not directory.exists():
        raise FileNotFoundError(f"checkpoint directory not found: {directory}")
    config = TrainConfig.from_dict(json.loads((directory / "config.json").read_text()))
    model_state = torch.load(directory / "model.pt", map_location="cpu", weights_only=True)
    optimizer_state = torch.load(
        directory / "optimizer.pt", map_location="cpu", weights_only=False
    )
    progress = json.loads((directory / "progress.json").read_text())
    return CheckpointRecord(
        config=config,
        model_state=model_state,
        optimizer_state=optimizer_state,
        progress=progress,
    )


def _fetch(dataset, index: int) -> SampleRecord:
    return dataset[int(index)]


def _prepare_labeled(rec: SampleRecord, config: TrainConfig, rng) -> SampleRecord:
    if config.augment:
        return augment(rec, rng)
    return SampleRecord(
        image=normalize_image(rec.image), classes=rec.classes, meta=rec.meta
    )


# Knobs that steer when a run pauses or what gets logged, but not the
# optimization trajectory itself; a resumed run may change these freely.
_RUN_CONTROL_FIELDS = frozenset(
    {
        "max_steps",
        "checkpoint_every",
        "early_stop_patience",
        "val_every",
        "val_max_images",
        "val_steps",
    }
)


def train(
    config: TrainConfig,
    labeled,
    unlabeled=None,
    validation=None,
    out_dir="runs/train",
    resume_from=None,
):
    """Run the full optimization loop; returns (CheckpointRecord, metrics path).

    ``labeled``/``unlabeled``/``validation`` are indexable collections of
    SampleRecords (``unlabeled`` may be None for supervised-only training).
    Checkpoints land under ``out_dir/checkpoints``; metrics under
    ``out_dir/metrics.csv``.  ``resume_from`` may name a checkpoint directory
    written by an earlier (possibly interrupted) run with the same config;
    the continuation reproduces the uninterrupted run exactly.
    """
    if labeled is None or len(labeled) == 0:
        raise ValueError("training requires a non-empty labeled set")
    has_unlabeled = unlabeled is not None and len(unlabeled) > 0

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_root = out_dir / "checkpoints"

    schedule = make_schedule(config.total_steps, config.schedule_kind)
    denoiser = build_denoiser(config.denoiser, derive_seed(config.seed, "init"))
    optimizer = torch.optim.AdamW(
        denoiser.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )

    start_epoch = 0
    start_slot = 0
    global_step = 0
    best_iou = -1.0
    epochs_since_best = 0
    if resume_from is not None:
        record = load_checkpoint(resume_from)
        theirs = record.config.to_dict()
        ours = config.to_dict()
        for key in _RUN_CONTROL_FIELDS:
            theirs.pop(key, None)
            ours.pop(key, None)
        if theirs != ours:
            raise ValueError(
                "resume config does not match: checkpoint was written with "
                "different settings"
            )
        denoiser.load_state_dict(record.model_state)
        optimizer.load_state_dict(record.optimizer_state)
        start_epoch = int(record.progress["epoch"])
        start_slot = int(record.progress["slot"])
        global_step = int(record.progress["global_step"])
        best_iou = float(record.progress.get("best_iou", -1.0))
        epochs_since_best = int(record.progress.get("epochs_since_best", 0))

    log = MetricsLog(out_dir / "metrics.csv", resume=resume_from is not None)
    started = time.monotonic()
    slots_per_epoch = math.ceil(len(labeled) / config.batch_size)
    denoiser.train()
    stop = False
    stop_position = None

    def progress_payload(epoch, slot):
        return {
            "epoch": epoch,
            "slot": slot,
            "global_step": global_step,
            "best_iou": best_iou,
            "epochs_since_best": epochs_since_best,
            "seed": config.seed,
        }

    try:
        for epoch in range(start_epoch, config.epochs):
            order = stream(config.seed, "order", epoch).permutation(len(labeled))
            if has_unlabeled:
                uorder = stream(config.seed, "uorder", epoch).permutation(len(unlabeled))
            first_slot = start_slot if epoch == start_epoch else 0
            for slot in range(first_slot, slots_per_epoch):
                idxs = order[slot * config.batch_size : (slot + 1) * config.batch_size]
                batch = [
                    _prepare_labeled(
                        _fetch(labeled, i), config, stream(config.seed, "aug", epoch, slot, j)
                    )
                    for j, i in enumerate(idxs)
                ]
                loss_l = supervised_step(
                    batch,
                    denoiser,
                    schedule,
                    optimizer,
                    config.scratch_weight,
                    stream(config.seed, "sup", epoch, slot),
                )
                loss_u = None
                lam_mean = None
                if has_unlabeled:
                    picks = [
                        int(uorder[(slot * config.unlabeled_batch_size + j) % len(unlabeled)])
                        for j in range(config.unlabeled_batch_size)
                    ]
                    images = [
                        _prepare_labeled(
                            _fetch(unlabeled, i),
                            config,
                            stream(config.seed, "uaug", epoch, slot, j),
                        ).image
                        for j, i in enumerate(picks)
                    ]
                    for _ in range(config.unsup_per_sup):
                        loss_u, lambdas = unsupervised_step(
                            images,
                            denoiser,
                            schedule,
                            config,
                            optimizer,
                            stream(config.seed, "unsup", epoch, slot),
                        )
                        lam_mean = float(np.mean(lambdas)) if lambdas else None
                if not math.isfinite(loss_l) or (loss_u is not None and not math.isfinite(loss_u)):
                    raise RuntimeError(
                        f"non-finite loss at step {global_step}: loss_l={loss_l}, loss_u={loss_u}"
                    )
                global_step += 1
                log.write(
                    step=global_step,
                    epoch=epoch,
                    loss_l=loss_l,
                    loss_u=loss_u,
                    lambda_mean=lam_mean,
                    wall_time=round(time.monotonic() - started, 3),
                )
                if config.checkpoint_every and global_step % config.checkpoint_every == 0:
                    save_checkpoint(
                        ckpt_root / "last",
                        denoiser,
                        optimizer,
                        config,
                        progress_payload(epoch, slot + 1),
                    )
                if config.max_steps is not None and global_step >= config.max_steps:
                    stop = True
                    stop_position = (epoch, slot + 1)
                    break
            if stop:
                break

            if validation is not None and len(validation) > 0 and (epoch + 1) % config.val_every == 0:
                val_set = list(validation)
                if config.val_max_images is not None:
                    val_set = val_set[: config.val_max_images]
                report = validate(denoiser, schedule, val_set, config, config.seed)
                log.write(
                    step=global_step,
                    epoch=epoch,
                    val_iou=report.iou,
                    val_dice=report.dice,
                    val_accuracy=report.accuracy,
                    val_shallow_recall=report.shallow_recall,
                    val_deep_recall=report.deep_recall,
                    wall_time=round(time.monotonic() - started, 3),
                )
                if report.iou > best_iou:
                    best_iou = report.iou
                    epochs_since_best = 0
                    save_checkpoint(
                        ckpt_root / "best",
                        denoiser,
                        optimizer,
                        config,
                        progress_payload(epoch + 1, 0),
                    )
                else:
                    epochs_since_best += 1
                    if (
                        config.early_stop_patience is not None
                        and epochs_since_best >= config.early_stop_patience
                    ):
                        stop = True
                        stop_position = (epoch + 1, 0)
            save_checkpoint(
                ckpt_root / "last", denoiser, optimizer, config, progress_payload(epoch + 1, 0)
            )
            if stop:
                break
    finally:
        log.close()

    final_position = stop_position if stop_position is not None else (config.epochs, 0)
    final_dir = save_checkpoint(
        ckpt_root / "last",
        denoiser,
        optimizer,
        config,
        progress_payload(*final_position),
    )
    record = CheckpointRecord(
        config=config,
        model_state=denoiser.state_dict(),
        optimizer_state=optimizer.state_dict(),
        progress=json.loads((final_dir / "progress.json").read_text()),
    )
    return record, out_dir / "metrics.csv"
