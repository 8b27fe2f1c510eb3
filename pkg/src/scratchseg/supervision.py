"""Training signals built from resampled shortened denoising rollouts.

For an unlabeled image, several denoising trajectories are rolled out over a
shared shortened step subsequence; their refined predictions yield a
pseudo-label (thresholded mean of the final estimates), a per-pixel loss mask
(confidence gate x dispersion gate, both modulated by the spectral
consistency feature of the texture-entropy series), and a consistency loss
tying recorded noisy states to the pseudo-label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import texture
from .denoiser import predict_noise
from .diffusion import NoiseSchedule, estimate_x0, reverse_step

__all__ = [
    "PredictionSequenceSet",
    "SupervisionSignal",
    "sample_step_subsequence",
    "build_sequences",
    "pseudo_label",
    "loss_mask",
    "unsupervised_loss",
    "evaluate_sequences",
    "entropy_sequences",
    "write_sequence_archive",
    "read_sequence_archive",
]


def sample_step_subsequence(total_steps: int, num_parts: int, rng) -> tuple:
    """Draw one step uniformly from each of ``num_parts`` equal parts of [1, T].

    Part ``j`` (1-based) covers steps ``(floor((j-1)*T/M), floor(j*T/M)]``, so
    every part is non-empty and the top draw always lies in the final part.
    Returns the draws as a strictly decreasing tuple (the visit order of the
    shortened reverse process).  ``num_parts == total_steps`` degenerates to
    the full sequence T, T-1, ..., 1.
    """
    total = int(total_steps)
    parts = int(num_parts)
    if parts < 1 or parts > total:
        raise ValueError(
            f"num_parts must lie in [1, total_steps={total}], got {num_parts}"
        )
    gen = np.random.default_rng(rng)
    draws = []
    for j in range(1, parts + 1):
        lo = (j - 1) * total // parts
        hi = j * total // parts
        draws.append(int(gen.integers(lo + 1, hi + 1)))
    return tuple(reversed(draws))


@dataclass(frozen=True)
class PredictionSequenceSet:
    """Recorded states of N shortened rollouts over one shared subsequence.

    All grids are float64 tensors of shape (N, M, H, W) whose position axis
    follows visit order: entry 0 belongs to ``steps[0]`` (the largest step)
    and entry M-1 to ``steps[-1]`` (the final, most-refined estimate).
    """

    steps: tuple
    x0_preds: torch.Tensor
    noisy: torch.Tensor
    eps_hat: torch.Tensor

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if len(steps) == 0:
            raise ValueError("steps must be non-empty")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"steps must be strictly decreasing, got {steps}")
        shape = self.x0_preds.shape
        if len(shape) != 4 or shape[1] != len(steps):
            raise ValueError(
                f"x0_preds must be (N, {len(steps)}, H, W), got {tuple(shape)}"
            )
        if self.noisy.shape != shape or self.eps_hat.shape != shape:
            raise ValueError("x0_preds, noisy, and eps_hat must share one shape")
        if torch.any(self.x0_preds < -1.0) or torch.any(self.x0_preds > 1.0):
            raise ValueError("x0_preds entries must lie in [-1, 1]")

    @property
    def num_trajectories(self) -> int:
        return int(self.x0_preds.shape[0])

    @property
    def num_positions(self) -> int:
        return int(self.x0_preds.shape[1])

    def probs(self) -> torch.Tensor:
        """Probability view of every prediction: shape (N, M, H, W) in [0, 1]."""
        return (self.x0_preds + 1.0) / 2.0

    def final_probs(self) -> torch.Tensor:
        """Probability view of the final refined estimate per trajectory."""
        return (self.x0_preds[:, -1] + 1.0) / 2.0

    def prior_inputs(self) -> torch.Tensor:
        """The prior fed into the denoiser at each position (zeros, then shifted)."""
        shifted = torch.zeros_like(self.x0_preds)
        shifted[:, 1:] = self.x0_preds[:, :-1]
        return shifted


@dataclass(frozen=True)
class SupervisionSignal:
    """Pseudo-label, loss mask, consistency feature, and mean final prediction."""

    pseudo_label: torch.Tensor
    loss_mask: torch.Tensor
    consistency: float
    mean_final: torch.Tensor

    def __post_init__(self):
        if not 0.0 <= self.consistency <= 1.0:
            raise ValueError(f"consistency must lie in [0, 1], got {self.consistency}")


def build_sequences(
    image,
    denoiser,
    schedule: NoiseSchedule,
    num_positions: int,
    num_trajectories: int,
    rng,
    noise_mode: str = "gaussian",
) -> PredictionSequenceSet:
    """Roll out N trajectories over one shared shortened subsequence.

    Initial states are independent standard normals; the running clean-mask
    estimate of each trajectory is fed back as its prior.  No gradients are
    recorded.  Deterministic given the rng seed.
    """
    if num_trajectories < 1:
        raise ValueError(f"num_trajectories must be >= 1, got {num_trajectories}")
    if getattr(denoiser, "training", False):
        raise ValueError("denoiser must be in eval mode for rollout construction")
    gen = np.random.default_rng(rng)
    steps = sample_step_subsequence(schedule.num_steps, num_positions, gen)

    img = torch.as_tensor(np.asarray(image)) if not isinstance(image, torch.Tensor) else image
    height, width = img.shape[-2], img.shape[-1]
    n = int(num_trajectories)
    x = torch.from_numpy(gen.standard_normal((n, height, width)))
    prior = torch.zeros((n, height, width), dtype=torch.float64)

    x0_preds = torch.empty((n, len(steps), height, width), dtype=torch.float64)
    noisy = torch.empty_like(x0_preds)
    eps_rec = torch.empty_like(x0_preds)
    with torch.no_grad():
        for p, t in enumerate(steps):
            noisy[:, p] = x
            eps_hat = predict_noise(denoiser, x, t, img, prior).to(torch.float64)
            eps_rec[:, p] = eps_hat
            prior = estimate_x0(x, t, eps_hat, schedule)
            x0_preds[:, p] = prior
            z = None
            if noise_mode == "gaussian" and t > 1:
                z = torch.from_numpy(gen.standard_normal((n, height, width)))
            x = reverse_step(x, t, eps_hat, z, schedule, noise_mode=noise_mode)
    return PredictionSequenceSet(steps=steps, x0_preds=x0_preds, noisy=noisy, eps_hat=eps_rec)


def pseudo_label(seq_set: PredictionSequenceSet, mask_threshold: float) -> torch.Tensor:
    """Binary mask: 1 where the mean final prediction is >= the threshold."""
    mean_final = seq_set.final_probs().mean(dim=0)
    return (mean_final >= float(mask_threshold)).to(torch.float64)


def loss_mask(
    seq_set: PredictionSequenceSet,
    consistency: float,
    confidence_threshold: float,
    dispersion_threshold: float,
    mode: str = "consistency",
) -> torch.Tensor:
    """Per-pixel gate: confident foreground and low cross-trajectory dispersion.

    Both thresholds are relaxed by the factor ``(1 - consistency)``.  The
    dispersion is the mean absolute deviation of the per-position predictions
    around their cross-trajectory mean, averaged over every position, in
    probability view.  ``mode="consistency"`` (default) keeps pixels whose
    dispersion is at most the threshold; ``mode="literal"`` keeps pixels with
    dispersion at least the threshold instead.
    """
    if not 0.0 <= consistency <= 1.0:
        raise ValueError(f"consistency must lie in [0, 1], got {consistency}")
    if mode not in ("consistency", "literal"):
        raise ValueError(f"mode must be 'consistency' or 'literal', got {mode!r}")
    probs = seq_set.probs()
    mean_per_position = probs.mean(dim=0, keepdim=True)
    dispersion = (probs - mean_per_position).abs().mean(dim=(0, 1))
    mean_final = probs[:, -1].mean(dim=0)

    relax = 1.0 - float(consistency)
    confident = mean_final >= relax * float(confidence_threshold)
    if mode == "consistency":
        calm = dispersion <= relax * float(dispersion_threshold)
    else:
        calm = dispersion >= relax * float(dispersion_threshold)
    return (confident & calm).to(torch.float64)


def unsupervised_loss(
    seq_set: PredictionSequenceSet,
    pseudo: torch.Tensor,
    mask: torch.Tensor,
    schedule: NoiseSchedule,
    eps_hat: torch.Tensor | None = None,
) -> torch.Tensor:
    """Consistency loss between recorded noisy states and the pseudo-label.

    At each recorded position the residual is the noise the state would imply
    if the pseudo-label were the clean mask, minus the predicted noise; the
    residuals of a trajectory are summed over positions, scaled by 1/(M*N),
    gated by the loss mask, and the per-trajectory mean-square norms are
    summed.  ``eps_hat`` defaults to the recorded (gradient-free) predictions;
    pass a re-evaluated tensor of the same shape to let gradients flow.
    """
    preds = seq_set.eps_hat if eps_hat is None else eps_hat
    if preds.shape != seq_set.noisy.shape:
        raise ValueError(
            f"eps_hat shape {tuple(preds.shape)} must match recorded states "
            f"{tuple(seq_set.noisy.shape)}"
        )
    signal = 2.0 * torch.as_tensor(pseudo, dtype=torch.float64) - 1.0
    abar = np.asarray(schedule.alpha_bar(np.asarray(seq_set.steps)))
    root = torch.as_tensor(np.sqrt(abar)).reshape(1, -1, 1, 1)
    inv_comp = torch.as_tensor(1.0 / np.sqrt(1.0 - abar)).reshape(1, -1, 1, 1)
    residual = inv_comp * (seq_set.noisy - root * signal) - preds
    per_traj = residual.sum(dim=1)
    scale = seq_set.num_positions * seq_set.num_trajectories
    gated = torch.as_tensor(mask, dtype=per_traj.dtype) * per_traj / scale
    return (gated**2).mean(dim=(-2, -1)).sum()


def entropy_sequences(
    seq_set: PredictionSequenceSet, mask_threshold: float = 0.5, window: int = 3
) -> list:
    """Per-trajectory texture-entropy series along the refinement.

    Entry 0 is the entropy of the initial all-zero prior; entries 1..M follow
    the visited steps in order, each computed on the binarized clean-mask
    estimate.  Length is always M + 1.
    """
    probs = seq_set.probs().numpy()
    n, m = probs.shape[0], probs.shape[1]
    zero_map = np.zeros(probs.shape[2:], dtype=np.uint8)
    first = texture.map_entropy(zero_map, num_classes=2, window=window)
    out = []
    for i in range(n):
        series = [first]
        for p in range(m):
            classes = texture.binarize(probs[i, p], mask_threshold)
            series.append(texture.map_entropy(classes, num_classes=2, window=window))
        out.append(np.asarray(series, dtype=np.float64))
    return out


def evaluate_sequences(
    seq_set: PredictionSequenceSet,
    mask_threshold: float = 0.5,
    confidence_threshold: float = 0.8,
    dispersion_threshold: float = 0.05,
    highfreq_cutoff: int = 9,
    mode: str = "consistency",
    window: int = 3,
) -> SupervisionSignal:
    """Package pseudo-label, loss mask, and consistency feature for one image."""
    seqs = entropy_sequences(seq_set, mask_threshold, window=window)
    lam = texture.consistency_feature(seqs, highfreq_cutoff)
    label = pseudo_label(seq_set, mask_threshold)
    mask = loss_mask(seq_set, lam, confidence_threshold, dispersion_threshold, mode)
    mean_final = seq_set.final_probs().mean(dim=0)
    return SupervisionSignal(
        pseudo_label=label, loss_mask=mask, consistency=lam, mean_final=mean_final
    )


# ---------------------------------------------------------------------------
# Mask-sequence archive: binarized refinement series on disk, one raster per
# (trajectory, position), consumed by the `texent` CLI subcommand.
# ---------------------------------------------------------------------------

ARCHIVE_MANIFEST = "sequence_manifest.jsonl"


def write_sequence_archive(out_dir, steps, trajectories, mask_threshold: float = 0.5) -> Path:
    """Write binarized mask series plus a manifest; returns the manifest path.

    ``trajectories`` is a list (one entry per trajectory) of lists of binary
    class maps; each trajectory holds the initial prior map followed by one
    map per visited step, so its length is ``len(steps) + 1``.
    """
    from PIL import Image

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    steps = [int(s) for s in steps]
    lines = [
        json.dumps(
            {
                "kind": "mask-sequence-archive",
                "steps": steps,
                "num_trajectories": len(trajectories),
                "mask_threshold": float(mask_threshold),
            }
        )
    ]
    for i, series in enumerate(trajectories):
        if len(series) != len(steps) + 1:
            raise ValueError(
                f"trajectory {i} has {len(series)} maps, expected {len(steps) + 1}"
            )
        for p, mask in enumerate(series):
            arr = np.asarray(mask).astype(np.uint8)
            name = f"traj{i:02d}_pos{p:02d}.png"
            Image.fromarray(arr, mode="L").save(root / name)
            step = None if p == 0 else steps[p - 1]
            lines.append(
                json.dumps({"trajectory": i, "position": p, "step": step, "path": name})
            )
    manifest = root / ARCHIVE_MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_sequence_archive(archive_dir):
    """Load an archive directory; returns (steps, list of per-trajectory map lists).

    Malformed manifests raise ValueError naming the offending line number.
    """
    from PIL import Image

    root = Path(archive_dir)
    manifest = root / ARCHIVE_MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest found at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines:
        raise ValueError(f"{manifest}: line 1: empty manifest")

    def fail(lineno, message):
        raise ValueError(f"{manifest}: line {lineno}: {message}")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"invalid header: {exc}")
    if header.get("kind") != "mask-sequence-archive":
        fail(1, "missing mask-sequence-archive header")
    steps = [int(s) for s in header["steps"]]
    count = int(header["num_trajectories"])
    series_len = len(steps) + 1
    maps = [[None] * series_len for _ in range(count)]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            i, p, name = int(entry["trajectory"]), int(entry["position"]), entry["path"]
        except KeyError as exc:
            fail(lineno, f"entry missing field {exc}")
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            fail(lineno, f"bad entry: {exc}")
        if not (0 <= i < count) or not (0 <= p < series_len):
            fail(lineno, f"trajectory/position ({i}, {p}) out of range")
        path = root / name
        if not path.exists():
            fail(lineno, f"missing raster {name}")
        maps[i][p] = np.asarray(Image.open(path), dtype=np.uint8)
    for i, series in enumerate(maps):
        for p, entry in enumerate(series):
            if entry is None:
                fail(len(lines), f"trajectory {i} position {p} never listed")
    return steps, maps
