"""Procedural demo corpus in the industrial-inspection directory layout.

Normal images are soft horizontal stripes with per-image phase/amplitude
jitter; anomalous test images swap a blob-shaped region (thresholded
gradient noise, exactly the simulator's mask family) for a high-contrast
checkerboard and ship with exact ground-truth masks.  A side directory of
textures — checkerboards plus diagonal stripes, gradients, and blob noise —
is emitted for the simulation texture pool, so the training-time synthesis
covers the anomaly family and the corpus is separable by construction.

Checker cells span size/8 pixels so the pattern stays visible after the
encoder's downsampling.  Intended for demos and the self-contained
end-to-end tests; everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .anomaly_sim import perlin2d, perlin_mask
from .errors import ParameterError


@dataclass
class CorpusSpec:
    """Shape of the generated tree."""

    category: str = "stripes"
    size: int = 64
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    n_textures: int = 12
    seed: int = 0


def striped_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One defect-free sample: soft horizontal stripes plus mild noise."""
    period = 8.0
    phase = rng.uniform(0.0, period)
    amp = rng.uniform(0.25, 0.35)
    base = rng.uniform(0.5, 0.6)
    rows = np.arange(size, dtype=np.float64)
    wave = base + amp * np.sin(2.0 * np.pi * (rows + phase) / period)
    img = np.repeat(wave[:, None], size, axis=1)
    img = img[:, :, None].repeat(3, axis=2)
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def checker_image(
    rng: np.random.Generator, size: int, period: int | None = None
) -> np.ndarray:
    """High-contrast checkerboard used as the anomalous content.

    Cells default to size/8 pixels: coarse enough to survive the encoder's
    stride-2 stages, so swapped-in regions stay visible at every compared
    feature scale.
    """
    if period is None:
        period = max(2, size // 8)
    rows = np.arange(size) // period
    cols = np.arange(size) // period
    board = (rows[:, None] + cols[None, :]) % 2
    lo = rng.uniform(0.0, 0.1)
    hi = rng.uniform(0.9, 1.0)
    plane = np.where(board > 0, hi, lo).astype(np.float32)
    img = plane[:, :, None].repeat(3, axis=2)
    img = img + rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _blob_mask(rng: np.random.Generator, size: int, min_area: int) -> np.ndarray:
    """A non-trivial blob mask from thresholded gradient noise."""
    for _ in range(64):
        freq = int(rng.choice([2, 4]))
        field = perlin2d(size, size, (freq, freq), rng)
        mask = perlin_mask(field, 0.5)
        if int(mask.sum()) >= min_area:
            return mask
    # Fallback: a centered square patch (practically unreachable).
    mask = np.zeros((size, size), dtype=np.uint8)
    quarter = size // 4
    mask[quarter : 3 * quarter, quarter : 3 * quarter] = 1
    return mask


def anomalous_image(
    rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """A striped image with a checkerboard blob swapped in, plus its mask."""
    img = striped_image(rng, size)
    mask = _blob_mask(rng, size, min_area=max(16, (size * size) // 50))
    checker = checker_image(rng, size)
    m = mask.astype(np.float32)[:, :, None]
    out = (1.0 - m) * img + m * checker
    return np.clip(out, 0.0, 1.0).astype(np.float32), mask


def texture_image(rng: np.random.Generator, size: int, kind: int) -> np.ndarray:
    """Pool textures: checkerboards, diagonal stripes, gradients, blob noise."""
    if kind % 4 == 0:
        img = checker_image(rng, size, period=max(2, size // int(rng.choice([4, 8]))))
        return img
    if kind % 4 == 1:
        period = float(rng.integers(4, 10))
        rows = np.arange(size)[:, None]
        cols = np.arange(size)[None, :]
        wave = 0.5 + 0.3 * np.sin(2.0 * np.pi * (rows + cols) / period)
        img = wave[:, :, None].repeat(3, axis=2)
    elif kind % 4 == 2:
        ramp = np.linspace(0.2, 0.8, size)
        img = np.outer(ramp, np.ones(size))[:, :, None].repeat(3, axis=2)
        img = img * rng.uniform(0.7, 1.3, size=3)
    else:
        field = perlin2d(size, size, (4, 4), rng)
        img = (0.5 + 0.4 * field.values)[:, :, None].repeat(3, axis=2)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def build_corpus(root: str | Path, spec: CorpusSpec | None = None) -> Path:
    """Write the full tree under ``root`` and return the category path.

    Layout: ``<root>/<category>/train/good``, ``test/good``, ``test/swap``,
    ``ground_truth/swap`` plus ``<root>/textures``.
    """
    spec = spec or CorpusSpec()
    if spec.size < 16 or spec.size % 16 != 0:
        raise ParameterError(
            f"corpus size must be a positive multiple of 16, got {spec.size}"
        )
    rng = np.random.default_rng(spec.seed)
    base = Path(root) / spec.category
    train_dir = base / "train" / "good"
    test_good = base / "test" / "good"
    test_bad = base / "test" / "swap"
    gt_dir = base / "ground_truth" / "swap"
    tex_dir = Path(root) / "textures"
    for d in (train_dir, test_good, test_bad, gt_dir, tex_dir):
        d.mkdir(parents=True, exist_ok=True)

    for i in range(spec.n_train):
        dataio.save_image(striped_image(rng, spec.size), train_dir / f"{i:03d}.png")
    for i in range(spec.n_test_normal):
        dataio.save_image(striped_image(rng, spec.size), test_good / f"{i:03d}.png")
    for i in range(spec.n_test_anomalous):
        img, mask = anomalous_image(rng, spec.size)
        dataio.save_image(img, test_bad / f"{i:03d}.png")
        dataio.save_mask(mask, gt_dir / f"{i:03d}_mask.png")
    for i in range(spec.n_textures):
        dataio.save_image(
            texture_image(rng, spec.size, i), tex_dir / f"tex{i:02d}.png"
        )
    return base
