"""Synthetic low-contrast scratch images: generation, dataset IO, augmentation.

Images are 8-bit grey rasters of a smooth illuminated background with speckle
noise, darkened along random curved scratches.  Deep scratches are clearly
darker; shallow scratches sit only a few grey levels below the background,
which is the regime the whole pipeline targets.  Ground truth is a 3-class
map (0 background, 1 shallow, 2 deep) rasterized exactly where scratch cores
were drawn.
"""

from __future__ import annotations

import hashlib
import json
import math
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image

from ._rng import derive_seed

__all__ = [
    "GenConfig",
    "SampleRecord",
    "DatasetManifest",
    "Dataset",
    "generate_sample",
    "generate_dataset",
    "load_dataset",
    "augment",
    "apply_geometric",
    "normalize_image",
    "MANIFEST_NAME",
]

MANIFEST_NAME = "manifest.jsonl"

_SPLITS = ("labeled_train", "unlabeled_train", "val", "test")


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic scratch generator."""

    size: tuple = (256, 256)
    channels: int = 1
    background_level: float = 120.0
    gradient_amplitude: float = 20.0
    speckle_sigma: float = 3.0
    deep_contrast: tuple = (10.0, 30.0)
    deep_width: tuple = (1.0, 3.0)
    deep_count: tuple = (1, 2)
    shallow_contrast: tuple = (2.0, 6.0)
    shallow_width: tuple = (1.0, 2.0)
    shallow_count: tuple = (1, 3)
    curvature: float = 0.25
    length_frac: tuple = (0.3, 0.9)
    seed: int = 0

    def __post_init__(self):
        h, w = self.size
        if h < 8 or w < 8:
            raise ValueError(f"image size must be at least 8x8, got {self.size}")
        if self.channels != 1:
            raise ValueError("only single-channel grey images are supported")
        for name in ("deep_contrast", "deep_width", "shallow_contrast", "shallow_width", "length_frac"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be an increasing positive range, got {(lo, hi)}")
        if self.shallow_contrast[1] >= self.deep_contrast[0]:
            raise ValueError(
                "shallow contrast range must sit strictly below deep contrast: "
                f"{self.shallow_contrast} vs {self.deep_contrast}"
            )
        if not (0.0 <= self.background_level <= 255.0):
            raise ValueError(f"background_level must be a grey level in [0, 255]")
        if self.gradient_amplitude < 0 or self.speckle_sigma < 0:
            raise ValueError("gradient_amplitude and speckle_sigma must be >= 0")
        for name in ("deep_count", "shallow_count"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} must be a non-decreasing count range, got {(lo, hi)}")

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class SampleRecord:
    """One image with its (possibly absent) class map and generator metadata."""

    image: np.ndarray
    classes: Optional[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def labeled(self) -> bool:
        return self.classes is not None


def _bezier_points(p0, p1, ctrl, spacing: float = 0.2) -> np.ndarray:
    """Dense points along a quadratic bezier, roughly ``spacing`` apart."""
    approx_len = np.linalg.norm(p1 - p0) + np.linalg.norm(ctrl - p0) + np.linalg.norm(p1 - ctrl)
    n = max(int(approx_len / spacing), 8)
    ts = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - ts) ** 2 * p0 + 2 * ts * (1 - ts) * ctrl + ts**2 * p1


def _draw_scratch(darkening, classes, cls, contrast, width, rng, cfg):
    """Darken along one random curved stroke and stamp its class id."""
    h, w = darkening.shape
    lo, hi = cfg.length_frac
    length = rng.uniform(lo, hi) * min(h, w)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.cos(angle), math.sin(angle)])
    margin = 2.0
    center = np.array(
        [rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)]
    )
    p0 = center - direction * length / 2
    p1 = center + direction * length / 2
    perp = np.array([-direction[1], direction[0]])
    ctrl = (p0 + p1) / 2 + perp * cfg.curvature * length * rng.uniform(-1.0, 1.0)
    points = _bezier_points(p0, p1, ctrl)

    # Rasterize via distance to the dense point cloud, restricted to a local
    # bounding box around the stroke.
    pad = width / 2 + 2.0
    x0 = max(int(np.floor(points[:, 0].min() - pad)), 0)
    x1 = min(int(np.ceil(points[:, 0].max() + pad)) + 1, w)
    y0 = max(int(np.floor(points[:, 1].min() - pad)), 0)
    y1 = min(int(np.ceil(points[:, 1].max() + pad)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    d2 = ((pix[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2.min(axis=1)).reshape(ys.shape)

    core = dist <= width / 2
    # Full contrast over the core, linear falloff over one extra pixel: the
    # stroke edge is soft but class pixels carry the configured contrast.
    profile = np.clip(width / 2 + 1.0 - dist, 0.0, 1.0)
    profile[core] = 1.0
    region_dark = darkening[y0:y1, x0:x1]
    np.maximum(region_dark, contrast * profile, out=region_dark)
    region_cls = classes[y0:y1, x0:x1]
    region_cls[core] = np.maximum(region_cls[core], cls)


def generate_sample(cfg: GenConfig, rng) -> SampleRecord:
    """Render one synthetic sample; deterministic for a given generator state."""
    gen = np.random.default_rng(rng)
    h, w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w]

    phase = gen.uniform(0.0, 2.0 * math.pi)
    plane = (xx / w - 0.5) * math.cos(phase) + (yy / h - 0.5) * math.sin(phase)
    background = (
        cfg.background_level
        + cfg.gradient_amplitude * plane
        + gen.normal(0.0, cfg.speckle_sigma, (h, w))
    )

    darkening = np.zeros((h, w), dtype=np.float64)
    classes = np.zeros((h, w), dtype=np.uint8)
    drawn = []
    for cls, contrast_range, width_range, count_range in (
        (1, cfg.shallow_contrast, cfg.shallow_width, cfg.shallow_count),
        (2, cfg.deep_contrast, cfg.deep_width, cfg.deep_count),
    ):
        count = int(gen.integers(count_range[0], count_range[1] + 1))
        for _ in range(count):
            contrast = gen.uniform(*contrast_range)
            width = gen.uniform(*width_range)
            _draw_scratch(darkening, classes, cls, contrast, width, gen, cfg)
            drawn.append({"class": cls, "contrast": contrast, "width": width})

    image = np.clip(np.rint(background - darkening), 0, 255).astype(np.uint8)
    meta = {"scratches": drawn, "config_hash": cfg.config_hash()}
    return SampleRecord(image=image, classes=classes, meta=meta)


@dataclass(frozen=True)
class DatasetManifest:
    """Split listing: relative image/mask paths plus provenance."""

    split: str
    entries: tuple
    config_hash: str
    seed: int

    def write(self, path) -> Path:
        path = Path(path)
        header = {
            "split": self.split,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "count": len(self.entries),
        }
        lines = [json.dumps(header)]
        for image_path, mask_path in self.entries:
            lines.append(json.dumps({"image": image_path, "mask": mask_path}))
        path.write_text("\n".join(lines) + "\n")
        return path

    @staticmethod
    def read(path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        lines = path.read_text().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            row = json.loads(line)
            entries.append((row["image"], row.get("mask")))
        if len(entries) != header.get("count", len(entries)):
            raise ValueError(f"{path}: entry count does not match header")
        return DatasetManifest(
            split=header["split"],
            entries=tuple(entries),
            config_hash=header["config_hash"],
            seed=int(header["seed"]),
        )


def _save_mask_png(path: Path, classes: np.ndarray) -> None:
    img = Image.fromarray(classes.astype(np.uint8), mode="P")
    img.putpalette([0, 0, 0, 255, 128, 0, 255, 0, 0] + [0] * (768 - 9))
    img.save(path)


def generate_dataset(cfg: GenConfig, counts: dict, out_dir) -> dict:
    """Write image/mask rasters plus one manifest per split; returns manifests.

    ``counts`` maps split names (labeled_train, unlabeled_train, val, test)
    to sample counts.  The unlabeled split's manifest lists no masks; its
    ground truth is still written to an ``oracle_masks`` sidecar directory
    that no loader ever reads during training.  Each sample's RNG stream is
    derived from (cfg.seed, split, index), so any subset regenerates
    identically.  On failure, partially written split directories are removed.
    """
    unknown = set(counts) - set(_SPLITS)
    if unknown:
        raise ValueError(f"unknown split names {sorted(unknown)}; expected {_SPLITS}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifests = {}
    created = []
    try:
        for split in _SPLITS:
            n = int(counts.get(split, 0))
            if n <= 0:
                continue
            split_dir = root / split
            if split_dir.exists():
                raise FileExistsError(f"refusing to overwrite existing split {split_dir}")
            created.append(split_dir)
            (split_dir / "images").mkdir(parents=True)
            unlabeled = split == "unlabeled_train"
            mask_dir = split_dir / ("oracle_masks" if unlabeled else "masks")
            mask_dir.mkdir()
            entries = []
            for i in range(n):
                sample = generate_sample(cfg, derive_seed(cfg.seed, split, i))
                name = f"{i:05d}.png"
                Image.fromarray(sample.image, mode="L").save(split_dir / "images" / name)
                _save_mask_png(mask_dir / name, sample.classes)
                entries.append(
                    (f"images/{name}", None if unlabeled else f"{mask_dir.name}/{name}")
                )
            manifest = DatasetManifest(
                split=split,
                entries=tuple(entries),
                config_hash=cfg.config_hash(),
                seed=cfg.seed,
            )
            manifest.write(split_dir / MANIFEST_NAME)
            manifests[split] = manifest
    except BaseException:
        for split_dir in created:
            shutil.rmtree(split_dir, ignore_errors=True)
        raise
    return manifests


class Dataset:
    """Lazy image/mask loader over one split manifest."""

    def __init__(self, manifest: DatasetManifest, root):
        self.manifest = manifest
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, index: int) -> SampleRecord:
        image_rel, mask_rel = self.manifest.entries[index]
        image_path = self.root / image_rel
        if not image_path.exists():
            raise FileNotFoundError(f"missing image file: {image_path}")
        image = np.asarray(Image.open(image_path).convert("L"), dtype=np.uint8)
        classes = None
        if mask_rel is not None:
            mask_path = self.root / mask_rel
            if not mask_path.exists():
                raise FileNotFoundError(f"missing mask file: {mask_path}")
            classes = np.asarray(Image.open(mask_path), dtype=np.uint8)
        return SampleRecord(
            image=image,
            classes=classes,
            meta={"split": self.manifest.split, "index": index},
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def shuffled_indices(self, seed: int) -> np.ndarray:
        """Deterministic permutation of record indices for one epoch."""
        return np.random.default_rng(seed).permutation(len(self))


def load_dataset(manifest_path) -> Dataset:
    """Open the split manifest at ``manifest_path`` and return a lazy handle."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = DatasetManifest.read(path)
    return Dataset(manifest, path.parent)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero-mean/unit-variance float32 view of a grey image."""
    arr = np.asarray(image, dtype=np.float32)
    std = float(arr.std())
    if std == 0.0:
        return arr - arr.mean()
    return (arr - arr.mean()) / std


def apply_geometric(
    sample: SampleRecord,
    flip_x: bool = False,
    flip_y: bool = False,
    scale: float = 1.0,
    angle_deg: float = 0.0,
) -> SampleRecord:
    """One affine warp (flips, uniform scale, rotation about the center).

    The identical transform hits image and class map; the image is resampled
    bilinearly with reflected borders, the class map with nearest neighbor
    and background fill, so no new class values can appear.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = sample.image.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(angle_deg)
    sx = -scale if flip_x else scale
    sy = -scale if flip_y else scale
    # Rotation composed with per-axis sign flips and uniform scale, all about
    # the image center.
    m00 = math.cos(theta) * sx
    m01 = -math.sin(theta) * sy
    m10 = math.sin(theta) * sx
    m11 = math.cos(theta) * sy
    matrix = np.array(
        [
            [m00, m01, cx - m00 * cx - m01 * cy],
            [m10, m11, cy - m10 * cx - m11 * cy],
        ],
        dtype=np.float64,
    )
    image = cv2.warpAffine(
        sample.image,
        matrix,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )
    classes = None
    if sample.classes is not None:
        classes = cv2.warpAffine(
            sample.classes,
            matrix,
            (w, h),
            flags=cv2.INTER_NEAREST,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=0,
        )
    meta = dict(sample.meta)
    meta["geometric"] = {
        "flip_x": flip_x,
        "flip_y": flip_y,
        "scale": scale,
        "angle_deg": angle_deg,
    }
    return SampleRecord(image=image, classes=classes, meta=meta)


def augment(sample: SampleRecord, rng) -> SampleRecord:
    """Random flips (p=0.5 per axis), scale in [0.8, 1.2], rotation in
    [0, 360); then intensity normalization to zero mean / unit variance."""
    gen = np.random.default_rng(rng)
    flip_x = bool(gen.random() < 0.5)
    flip_y = bool(gen.random() < 0.5)
    scale = float(gen.uniform(0.8, 1.2))
    angle = float(gen.uniform(0.0, 360.0))
    warped = apply_geometric(sample, flip_x, flip_y, scale, angle)
    return SampleRecord(
        image=normalize_image(warped.image), classes=warped.classes, meta=warped.meta
    )
