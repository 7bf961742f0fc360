"""Turning raw reconstructions into binary masks, and scoring them."""
from __future__ import annotations

import warnings
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pgm import to_uint8


class DegenerateImageWarning(UserWarning):
    pass


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur with reflection padding."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < size:
        raise ValueError(f"gaussian_blur: image {img.shape} smaller than {size}x{size}")
    k = gaussian_kernel(size, sigma)
    p = size // 2
    padded = np.pad(img, p, mode="reflect")
    rows = sliding_window_view(padded, size, axis=1) @ k  # (H+2p, W)
    return sliding_window_view(rows, size, axis=0) @ k  # (H, W)


class OtsuResult(NamedTuple):
    threshold: int
    mask: np.ndarray
    degenerate: bool


def otsu_threshold(image: np.ndarray) -> OtsuResult:
    """Otsu threshold on a 256-level image; pixels strictly above it map to 1.

    Between-class variance is compared exactly (rational arithmetic), so ties
    resolve to the lowest threshold deterministically.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    hist = np.bincount(img.ravel(), minlength=256).astype(np.int64)
    levels = np.nonzero(hist)[0]
    if len(levels) == 1:
        t = int(levels[0])
        warnings.warn("otsu_threshold: constant image", DegenerateImageWarning, stacklevel=2)
        return OtsuResult(t, np.zeros(img.shape, np.uint8), True)
    n = int(hist.sum())
    s = int((hist * np.arange(256)).sum())
    n0s = np.cumsum(hist).tolist()
    s0s = np.cumsum(hist * np.arange(256)).tolist()
    best_t, best = 0, Fraction(-1)
    for t in range(256):
        n0 = n0s[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            score = Fraction(0)
        else:
            # w0 w1 (mu0 - mu1)^2 up to the constant factor 1/N^2
            score = Fraction((n * s0s[t] - n0 * s) ** 2, n0 * n1)
        if score > best:
            best_t, best = t, score
    return OtsuResult(best_t, (img > best_t).astype(np.uint8), False)


def _neighbourhood(mask: np.ndarray) -> np.ndarray:
    return sliding_window_view(np.pad(mask, 1, mode="reflect"), (3, 3))


def erode(mask: np.ndarray) -> np.ndarray:
    return _neighbourhood(mask).min(axis=(2, 3)).astype(np.uint8)


def dilate(mask: np.ndarray) -> np.ndarray:
    return _neighbourhood(mask).max(axis=(2, 3)).astype(np.uint8)


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("expected a binary mask")
    return m.astype(np.uint8)


def morph_open(mask: np.ndarray) -> np.ndarray:
    """Erosion then dilation, 3x3 square element."""
    return dilate(erode(_binary(mask)))


def morph_close(mask: np.ndarray) -> np.ndarray:
    """Dilation then erosion, 3x3 square element."""
    return erode(dilate(_binary(mask)))


def binarize_pipeline(reconstruction: np.ndarray, sigma: float = 1.0) -> tuple[np.ndarray, bool]:
    """blur -> Otsu -> open -> close. Returns (mask, degenerate flag)."""
    blurred = gaussian_blur(reconstruction, 5, sigma)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateImageWarning)
        t, mask, degenerate = otsu_threshold(blurred)
    return morph_close(morph_open(mask)), degenerate


class DiceResult(NamedTuple):
    score: float
    empty: bool


def dice(a: np.ndarray, b: np.ndarray) -> DiceResult:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0 with ``empty`` set."""
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes differ, {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return DiceResult(1.0, True)
    return DiceResult(2.0 * int((a & b).sum()) / total, False)
