"""Texture statistics over discrete class maps.

A class map is reduced to local pattern codes (every KxK window encoded as a
base-k integer), the pattern distribution is summarized by its Shannon
entropy, and sequences of such entropies taken along a denoising trajectory
are scored for high-frequency churn in the spectral domain.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "pattern_encode",
    "structural_encoding",
    "texture_entropy",
    "consistency_feature",
    "binarize",
    "map_entropy",
]

# Keep encoded ids inside the exactly-representable int64 range.
_MAX_ID_BITS = 62


def _check_window_args(num_classes: int, window: int) -> None:
    if int(num_classes) != num_classes or num_classes < 2:
        raise ValueError(f"num_classes must be an integer >= 2, got {num_classes!r}")
    if int(window) != window or window < 2:
        raise ValueError(f"window must be an integer >= 2, got {window!r}")
    if window * window * math.log2(num_classes) > _MAX_ID_BITS:
        raise ValueError(
            f"pattern ids for num_classes={num_classes}, window={window} "
            f"overflow {_MAX_ID_BITS}-bit integers"
        )


def pattern_encode(classes: np.ndarray, num_classes: int = 2, window: int = 3) -> np.ndarray:
    """Encode every full KxK window of a class map as a base-k integer.

    The window's entries are read row by row; the entry at window position
    (r, c) contributes ``value * k**(r * K + c)``.  Output is an int64 map of
    shape (H - K + 1, W - K + 1).  The encoding is a bijection between window
    contents and ids in [0, k**(K*K)).
    """
    _check_window_args(num_classes, window)
    arr = np.asarray(classes)
    if arr.ndim != 2:
        raise ValueError(f"class map must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < window or arr.shape[1] < window:
        raise ValueError(
            f"class map {arr.shape} is smaller than the {window}x{window} window"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if np.any(rounded != arr):
            raise ValueError("class map entries must be integers")
        arr = rounded.astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= num_classes:
        raise ValueError(
            f"class values must lie in [0, {num_classes - 1}], "
            f"got range [{arr.min()}, {arr.max()}]"
        )
    windows = np.lib.stride_tricks.sliding_window_view(arr, (window, window))
    offsets = np.arange(window * window, dtype=np.int64).reshape(window, window)
    weights = np.int64(num_classes) ** offsets
    return np.einsum("ijrc,rc->ij", windows, weights, dtype=np.int64)


def structural_encoding(
    classes: np.ndarray, num_classes: int = 2, window: int = 3
) -> np.ndarray:
    """Normalized histogram of pattern ids over all full windows of a map.

    Returns a float64 vector of length ``num_classes ** (window * window)``
    whose entries are non-negative and sum to 1.
    """
    ids = pattern_encode(classes, num_classes=num_classes, window=window)
    num_bins = int(num_classes) ** (int(window) * int(window))
    counts = np.bincount(ids.ravel(), minlength=num_bins).astype(np.float64)
    return counts / counts.sum()


def texture_entropy(histogram: np.ndarray) -> float:
    """Shannon entropy, in bits, of a normalized pattern histogram."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.ndim != 1 or hist.size == 0:
        raise ValueError("histogram must be a non-empty 1-D vector")
    if np.any(hist < 0.0):
        raise ValueError("histogram entries must be non-negative")
    total = hist.sum()
    if not math.isclose(total, 1.0, abs_tol=1e-6):
        raise ValueError(f"histogram must sum to 1 (within 1e-6), got {total!r}")
    positive = hist[hist > 0.0]
    return float(-np.sum(positive * np.log2(positive)) + 0.0)


def map_entropy(classes: np.ndarray, num_classes: int = 2, window: int = 3) -> float:
    """Texture entropy of a class map: encode, histogram, entropy, in one call."""
    return texture_entropy(structural_encoding(classes, num_classes, window))


def binarize(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability-view map into a two-class uint8 map (>= is 1)."""
    arr = np.asarray(values, dtype=np.float64)
    return (arr >= float(threshold)).astype(np.uint8)


def _highfreq_fraction(sequence: np.ndarray, highfreq_cutoff: int) -> float:
    spectrum = np.abs(np.fft.fft(sequence))
    total = spectrum.sum()
    if total == 0.0:
        return 0.0
    return float(spectrum[highfreq_cutoff + 1 :].sum() / total)


def consistency_feature(
    sequences: Iterable[Sequence[float]] | np.ndarray, highfreq_cutoff: int
) -> float:
    """Mean high-frequency energy fraction over entropy sequences.

    For each sequence the discrete Fourier transform is taken over its full
    length and the fraction of summed spectral magnitude carried by bins with
    index strictly above ``highfreq_cutoff`` (two-sided: conjugate bins
    count) is formed; the fractions are averaged over sequences.  An all-zero
    sequence contributes 0.  Lies in [0, 1]; low values mean the entropy
    trajectory is dominated by slow trends, high values mean step-to-step
    churn.
    """
    if int(highfreq_cutoff) != highfreq_cutoff or highfreq_cutoff < 0:
        raise ValueError(f"highfreq_cutoff must be a non-negative integer, got {highfreq_cutoff!r}")
    arrs = [np.asarray(seq, dtype=np.float64) for seq in sequences]
    if len(arrs) == 0:
        raise ValueError("at least one entropy sequence is required")
    fractions = []
    for seq in arrs:
        if seq.ndim != 1 or seq.size < 2:
            raise ValueError(f"each entropy sequence must be 1-D with >= 2 entries, got shape {seq.shape}")
        if highfreq_cutoff >= seq.size:
            raise ValueError(
                f"highfreq_cutoff={highfreq_cutoff} must be smaller than the "
                f"sequence length {seq.size}"
            )
        fractions.append(_highfreq_fraction(seq, int(highfreq_cutoff)))
    return float(np.mean(fractions))
