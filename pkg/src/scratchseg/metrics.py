"""Segmentation metrics for the merged scratch class, plus tiled inference.

Predictions are binary (scratch vs background); ground truth keeps the
3-class map.  Shallow/deep recall measure how much of each ground-truth class
the binary prediction recovers, which is the only reading compatible with a
binary-trained model reporting both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ._rng import derive_seed
from .diffusion import NoiseSchedule, run_inference

__all__ = [
    "ConfusionCounts",
    "MetricReport",
    "confusion",
    "class_recalls",
    "metrics",
    "evaluate_pair",
    "aggregate",
    "sliding_window_infer",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.tn + other.tn,
        )


@dataclass(frozen=True)
class MetricReport:
    iou: float
    dice: float
    accuracy: float
    shallow_recall: float
    deep_recall: float
    undefined: frozenset = frozenset()

    def as_dict(self) -> dict:
        return {
            "iou": self.iou,
            "dice": self.dice,
            "accuracy": self.accuracy,
            "shallow_recall": self.shallow_recall,
            "deep_recall": self.deep_recall,
            "undefined": sorted(self.undefined),
        }


def _check_pair(pred: np.ndarray, gt_classes: np.ndarray):
    pred = np.asarray(pred)
    gt = np.asarray(gt_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if not np.isin(gt, (0, 1, 2)).all():
        raise ValueError("ground-truth class values must lie in {0, 1, 2}")
    return pred.astype(bool), gt


def confusion(pred, gt_classes) -> ConfusionCounts:
    """Binary confusion counts with positives = merged scratch (classes 1 and 2)."""
    pred, gt = _check_pair(pred, gt_classes)
    positive = gt >= 1
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & positive)),
        fp=int(np.count_nonzero(pred & ~positive)),
        fn=int(np.count_nonzero(~pred & positive)),
        tn=int(np.count_nonzero(~pred & ~positive)),
    )


def class_recalls(pred, gt_classes):
    """Per-class (hit, total) pairs: how many shallow/deep pixels were predicted scratch."""
    pred, gt = _check_pair(pred, gt_classes)
    out = []
    for cls in (1, 2):
        total = int(np.count_nonzero(gt == cls))
        hit = int(np.count_nonzero(pred & (gt == cls)))
        out.append((hit, total))
    return tuple(out)


def metrics(counts: ConfusionCounts, shallow: tuple, deep: tuple) -> MetricReport:
    """Assemble a MetricReport; degenerate denominators give flagged zeros."""
    undefined = set()

    def ratio(num, den, name):
        if den == 0:
            undefined.add(name)
            return 0.0
        return num / den

    iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn, "iou")
    dice = ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, "dice")
    accuracy = ratio(counts.tp + counts.tn, counts.total, "accuracy")
    shallow_recall = ratio(shallow[0], shallow[1], "shallow_recall")
    deep_recall = ratio(deep[0], deep[1], "deep_recall")
    return MetricReport(
        iou=iou,
        dice=dice,
        accuracy=accuracy,
        shallow_recall=shallow_recall,
        deep_recall=deep_recall,
        undefined=frozenset(undefined),
    )


def evaluate_pair(pred, gt_classes) -> MetricReport:
    """Metrics for one prediction/ground-truth pair."""
    shallow, deep = class_recalls(pred, gt_classes)
    return metrics(confusion(pred, gt_classes), shallow, deep)


def aggregate(pairs) -> MetricReport:
    """Micro-aggregated metrics over (pred, gt) pairs: counts summed, then ratios."""
    total = ConfusionCounts(0, 0, 0, 0)
    sh_hit = sh_tot = dp_hit = dp_tot = 0
    n = 0
    for pred, gt in pairs:
        total = total + confusion(pred, gt)
        (h1, t1), (h2, t2) = class_recalls(pred, gt)
        sh_hit += h1
        sh_tot += t1
        dp_hit += h2
        dp_tot += t2
        n += 1
    if n == 0:
        raise ValueError("aggregate needs at least one pair")
    return metrics(total, (sh_hit, sh_tot), (dp_hit, dp_tot))


def sliding_window_infer(
    image,
    denoiser,
    schedule: NoiseSchedule,
    window: int,
    stride: int,
    seed: int,
    steps: Optional[Sequence[int]] = None,
    mask_threshold: float = 0.5,
    noise_mode: str = "gaussian",
):
    """Tile a full image, run the denoising chain per tile, stitch, threshold.

    Tiles are laid on a stride grid with the last row/column snapped to the
    image border so coverage is total.  Each tile gets its own named RNG
    stream derived from ``seed`` and the tile's grid position; a single tile
    covering the whole image therefore reproduces ``run_inference`` with
    ``seed`` exactly.  Overlaps are averaged with uniform weights in
    probability view.  Returns (binary mask uint8, probability map float64).
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel (H, W) image, got shape {img.shape}")
    h, w = img.shape
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if window <= 0 or window > h or window > w:
        raise ValueError(f"window {window} must fit inside the image {img.shape}")
    if stride > window:
        raise ValueError(f"stride {stride} must not exceed window {window}")
    if steps is None:
        steps = range(schedule.num_steps, 0, -1)
    steps = [int(s) for s in steps]

    def offsets(extent: int) -> list:
        grid = list(range(0, extent - window + 1, stride))
        if grid[-1] != extent - window:
            grid.append(extent - window)
        return grid

    prob_sum = np.zeros((h, w), dtype=np.float64)
    weight = np.zeros((h, w), dtype=np.float64)
    for iy, y0 in enumerate(offsets(h)):
        for ix, x0 in enumerate(offsets(w)):
            tile = img[y0 : y0 + window, x0 : x0 + window]
            tile_seed = seed if (iy == 0 and ix == 0) else derive_seed(seed, "tile", iy, ix)
            result = run_inference(
                tile, denoiser, schedule, steps, tile_seed, noise_mode=noise_mode
            )
            prob = (result.mask.numpy() + 1.0) / 2.0
            prob_sum[y0 : y0 + window, x0 : x0 + window] += prob
            weight[y0 : y0 + window, x0 : x0 + window] += 1.0
    prob_map = prob_sum / weight
    return (prob_map >= mask_threshold).astype(np.uint8), prob_map
