"""Procedural IC-layout masks and SEM-style renderings.

Two structural families stand in for layout layers: TRACE (thin horizontal
strips on a routing-track grid, metal-like) and BLOB (filled rectangles,
diffusion-like). The node scale multiplies the feature width.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .pgm import read_pgm, write_pgm

TRACE, BLOB = "TRACE", "BLOB"
FINE, COARSE = "FINE", "COARSE"
CLASSES = (TRACE, BLOB)
SCALES = (FINE, COARSE)

MANIFEST_HEADER = ["cell_id", "class", "scale", "image", "mask"]
MAX_ATTEMPTS = 100
MIN_FG, MAX_FG = 0.05, 0.80


class MaskGenerationError(RuntimeError):
    pass


@dataclass
class LayoutMask:
    grid: np.ndarray  # uint8, 0 background / 1 foreground
    cls: str
    scale: str
    cell_id: str = ""

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    def foreground_fraction(self) -> float:
        return float(self.grid.mean())


@dataclass(frozen=True)
class SemParams:
    background_mean: float = 75.0
    foreground_mean: float = 135.0
    noise_std: float = 20.0
    shot_noise_factor: float = 20.0

    def __post_init__(self):
        for m in (self.background_mean, self.foreground_mean):
            if not 0 <= m <= 255:
                raise ValueError(f"mean {m} outside [0, 255]")
        if self.foreground_mean <= self.background_mean:
            raise ValueError("foreground mean must exceed background mean")
        if self.noise_std <= 0 or self.shot_noise_factor <= 0:
            raise ValueError("noise_std and shot_noise_factor must be positive")


@dataclass
class SemImage:
    pixels: np.ndarray  # float64 in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def feature_width(scale: str, size: int) -> int:
    w = max(1, round(size / 32))
    return 2 * w if scale == COARSE else w


def _draw_trace(rng, size, w):
    grid = np.zeros((size, size), np.uint8)
    # routing pitch 4w, tightened on tiny images so at least 3 tracks fit
    pitch = max(2 * w, min(4 * w, size // 3))
    tracks = size // pitch
    n = min(int(rng.integers(3, 9)), tracks)
    rows = rng.choice(tracks, size=n, replace=False)
    for t in rows:
        y = int(t) * pitch + (pitch - w) // 2
        length = int(rng.integers(size // 2, size + 1))
        x = int(rng.integers(0, size - length + 1))
        grid[y : y + w, x : x + length] = 1
    return grid


def _draw_blob(rng, size, w):
    grid = np.zeros((size, size), np.uint8)
    lo, hi = min(4 * w, size), min(8 * w, size)
    for _ in range(int(rng.integers(2, 6))):
        rh, rw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        y = int(rng.integers(0, size - rh + 1))
        x = int(rng.integers(0, size - rw + 1))
        grid[y : y + rh, x : x + rw] = 1
    return grid


def gen_mask(cls: str, scale: str, size: int, seed: int, cell_id: str = "") -> LayoutMask:
    if size < 16:
        raise ValueError(f"mask size must be >= 16, got {size}")
    if cls not in CLASSES or scale not in SCALES:
        raise ValueError(f"unknown class/scale {cls}/{scale}")
    rng = np.random.default_rng(seed)
    w = feature_width(scale, size)
    draw = _draw_trace if cls == TRACE else _draw_blob
    for _ in range(MAX_ATTEMPTS):
        grid = draw(rng, size, w)
        if MIN_FG <= grid.mean() <= MAX_FG:
            return LayoutMask(grid, cls, scale, cell_id or f"{cls}-{scale}-{seed}")
    raise MaskGenerationError(
        f"no {cls}/{scale} mask with foreground fraction in [{MIN_FG}, {MAX_FG}] after {MAX_ATTEMPTS} attempts"
    )


def render_sem(mask: LayoutMask, params: SemParams = SemParams(), seed: int = 0) -> SemImage:
    """Noisy grayscale rendering, quantized to 8-bit levels and scaled to [0,1].

    Shot noise is approximated by a Gaussian with variance base/shot_factor.
    """
    rng = np.random.default_rng(seed)
    g = mask.grid.astype(bool)
    base = np.where(g, params.foreground_mean, params.background_mean)
    gauss = rng.normal(0.0, params.noise_std, size=base.shape)
    shot = rng.normal(0.0, 1.0, size=base.shape) * np.sqrt(base / params.shot_noise_factor)
    value = np.clip(base + gauss + shot, 0.0, 255.0)
    return SemImage(np.rint(value) / 255.0)


def sample_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


@dataclass
class Dataset:
    """Paired images and masks with their manifest rows."""

    images: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.masks)

    def select(self, cls: str | None = None, scale: str | None = None) -> "Dataset":
        out = Dataset()
        for img, m in zip(self.images, self.masks):
            if (cls is None or m.cls == cls) and (scale is None or m.scale == scale):
                out.images.append(img)
                out.masks.append(m)
        return out

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([im.pixels for im in self.images])
        y = np.stack([m.grid.astype(np.float64) for m in self.masks])
        return x, y


def generate(
    counts: Mapping[tuple[str, str], int], size: int, seed: int, params: SemParams = SemParams()
) -> Dataset:
    ds = Dataset()
    for (cls, scale), n in counts.items():
        if n < 1:
            raise ValueError(f"count for {cls}/{scale} must be >= 1")
        ci, si = CLASSES.index(cls), SCALES.index(scale)
        for i in range(n):
            cell_id = f"{cls.lower()}_{scale.lower()}_{i:04d}"
            mask = gen_mask(cls, scale, size, sample_seed(seed, ci, si, i, 0), cell_id)
            ds.masks.append(mask)
            ds.images.append(render_sem(mask, params, sample_seed(seed, ci, si, i, 1)))
    return ds


def build_dataset(
    counts: Mapping[tuple[str, str], int],
    size: int,
    seed: int,
    outdir,
    params: SemParams = SemParams(),
    manifest_name: str = "manifest.csv",
) -> Path:
    """Write paired PGM files and a CSV manifest; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ds = generate(counts, size, seed, params)
    manifest = outdir / manifest_name
    rows = []
    for img, mask in zip(ds.images, ds.masks):
        img_name, mask_name = f"{mask.cell_id}_image.pgm", f"{mask.cell_id}_mask.pgm"
        write_pgm(outdir / img_name, np.rint(img.pixels * 255).astype(np.uint8))
        write_pgm(outdir / mask_name, (mask.grid * 255).astype(np.uint8))
        rows.append([mask.cell_id, mask.cls, mask.scale, img_name, mask_name])
    try:
        with open(manifest, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {manifest}: {exc.strerror}") from exc
    return manifest


def load_dataset(manifest) -> Dataset:
    manifest = Path(manifest)
    root = manifest.parent
    ds = Dataset()
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{manifest}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{manifest}:{lineno}: expected 5 fields, got {len(row)}")
            cell_id, cls, scale, img_name, mask_name = row
            pixels = read_pgm(root / img_name).astype(np.float64) / 255.0
            grid = (read_pgm(root / mask_name) > 127).astype(np.uint8)
            ds.images.append(SemImage(pixels))
            ds.masks.append(LayoutMask(grid, cls, scale, cell_id))
    return ds
