"""Synthetic anomaly generation.

Anomalous training samples are manufactured from defect-free images in three
stages: a band-limited random field is thresholded into a blob mask, the mask
is intersected with a foreground estimate, and a "noise" image (an unrelated
texture, or a patch-shuffled copy of the source) is blended into the masked
region with a random opacity.  Every operation takes an explicit
``numpy.random.Generator`` so a fixed seed reproduces the sample exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ParameterError

SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class PerlinField:
    """A smooth gradient-noise field with values in [-1, 1].

    ``values`` has shape (h, w); ``freq`` is the number of lattice cells per
    axis (rows, cols).  The field is exactly zero at lattice corners.
    """

    values: np.ndarray
    freq: tuple[int, int]


@dataclass
class SimConfig:
    """Parameters of the anomaly simulation pipeline."""

    delta_range: tuple[float, float] = (0.15, 1.0)
    perlin_threshold: float = 0.5
    bg_threshold: float = 0.05
    bg_invert: bool = False
    use_foreground_mask: bool = True
    texture_prob: float = 0.5
    structure_grid: int = 8
    perlin_min_exp: int = 0
    perlin_max_exp: int = 5
    max_mask_retries: int = 5

    def validate(self) -> None:
        lo, hi = self.delta_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError(
                f"delta_range must satisfy 0 <= lo <= hi <= 1, got {self.delta_range}"
            )
        if not (0.0 <= self.texture_prob <= 1.0):
            raise ConfigurationError(
                f"texture_prob must lie in [0, 1], got {self.texture_prob}"
            )
        if self.structure_grid < 1:
            raise ConfigurationError(
                f"structure_grid must be >= 1, got {self.structure_grid}"
            )
        if self.perlin_min_exp < 0 or self.perlin_max_exp < self.perlin_min_exp:
            raise ConfigurationError(
                "perlin exponents must satisfy 0 <= min <= max, got "
                f"({self.perlin_min_exp}, {self.perlin_max_exp})"
            )
        if self.max_mask_retries < 1:
            raise ConfigurationError(
                f"max_mask_retries must be >= 1, got {self.max_mask_retries}"
            )


@dataclass(frozen=True)
class SimulatedSample:
    """One synthetic anomaly: blended image, its mask, and provenance."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 {0, 1}
    delta: float  # blend opacity actually used
    noise_kind: str  # "texture" | "structure"
    degenerate: bool  # True when no non-empty mask could be drawn


def _fade(t: np.ndarray) -> np.ndarray:
    """Quintic smoothstep 6t^5 - 15t^4 + 10t^3 (zero slope at 0 and 1)."""
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2d(
    h: int, w: int, freq: tuple[int, int], rng: np.random.Generator
) -> PerlinField:
    """Sample a gradient-noise field on an (h, w) pixel grid.

    ``freq`` = (cells along rows, cells along cols); each component must be
    >= 1 and divide the corresponding image dimension.  Unit gradients are
    drawn at the (freq+1)^2 lattice corners; per-pixel values interpolate the
    corner dot products with a quintic smoothstep and are scaled by sqrt(2)
    so the range is [-1, 1].
    """
    fy, fx = int(freq[0]), int(freq[1])
    if fy < 1 or fx < 1:
        raise ParameterError(f"freq components must be >= 1, got {freq}")
    if h % fy != 0 or w % fx != 0:
        raise ParameterError(
            f"freq {freq} must divide the field shape ({h}, {w})"
        )
    dy, dx = h // fy, w // fx

    angles = rng.uniform(0.0, 2.0 * np.pi, size=(fy + 1, fx + 1))
    grad_y = np.sin(angles)
    grad_x = np.cos(angles)

    # Cell index and in-cell offset (in cell units) for each pixel.
    rows = np.arange(h)
    cols = np.arange(w)
    cy = rows // dy
    cx = cols // dx
    ty = ((rows % dy) / dy)[:, None]
    tx = ((cols % dx) / dx)[None, :]

    def corner_dot(off_y: int, off_x: int) -> np.ndarray:
        gy = grad_y[np.ix_(cy + off_y, cx + off_x)]
        gx = grad_x[np.ix_(cy + off_y, cx + off_x)]
        return gy * (ty - off_y) + gx * (tx - off_x)

    n00 = corner_dot(0, 0)
    n10 = corner_dot(1, 0)
    n01 = corner_dot(0, 1)
    n11 = corner_dot(1, 1)

    u = _fade(ty)
    v = _fade(tx)
    top = n00 + v * (n01 - n00)
    bottom = n10 + v * (n11 - n10)
    values = SQRT2 * (top + u * (bottom - top))
    np.clip(values, -1.0, 1.0, out=values)
    return PerlinField(values=values, freq=(fy, fx))


def perlin_mask(field: PerlinField, threshold: float) -> np.ndarray:
    """Binarize a field: 1 where value > threshold, else 0 (uint8)."""
    return (field.values > threshold).astype(np.uint8)


def foreground_mask(
    img: np.ndarray, bg_threshold: float, invert: bool = False
) -> np.ndarray:
    """Luminance-threshold foreground estimate.

    A pixel is foreground when its channel mean exceeds ``bg_threshold``;
    ``invert`` flips the estimate for bright-background categories.
    """
    lum = np.asarray(img, dtype=np.float64).mean(axis=2)
    mask = lum > bg_threshold
    if invert:
        mask = ~mask
    return mask.astype(np.uint8)


def compose_mask(fg: np.ndarray, blob: np.ndarray) -> np.ndarray:
    """Logical AND of a foreground mask and a blob mask."""
    if fg.shape != blob.shape:
        raise ParameterError(
            f"mask shapes differ: {fg.shape} vs {blob.shape}"
        )
    return (fg.astype(bool) & blob.astype(bool)).astype(np.uint8)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array (align-corners=False convention)."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(pos), 0, n_in - 1).astype(np.int64)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(pos - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(img.dtype)


def make_noise_image(
    src: np.ndarray,
    kind: str,
    texture_pool: list[np.ndarray],
    rng: np.random.Generator,
    grid: int = 8,
    jitter: bool = True,
) -> np.ndarray:
    """Build the image whose content fills the anomalous region.

    ``kind == "texture"``: a random pool image, randomly cropped (square crop
    of 50-100% of the shorter side) and bilinearly resized to the source
    shape.  ``kind == "structure"``: the source cut into ``grid x grid``
    patches, randomly permuted and reassembled; a mild color scale and a
    multiple-of-90-degrees rotation are applied unless ``jitter`` is False.
    """
    h, w = src.shape[:2]
    if kind == "texture":
        if not texture_pool:
            raise ConfigurationError(
                "texture noise requested but the texture pool is empty"
            )
        tex = texture_pool[int(rng.integers(0, len(texture_pool)))]
        th, tw = tex.shape[:2]
        short = min(th, tw)
        crop = int(rng.integers(max(1, short // 2), short + 1))
        y0 = int(rng.integers(0, th - crop + 1))
        x0 = int(rng.integers(0, tw - crop + 1))
        patch = tex[y0 : y0 + crop, x0 : x0 + crop]
        return _resize_bilinear(patch.astype(np.float32), h, w)

    if kind == "structure":
        if grid < 1 or h % grid != 0 or w % grid != 0:
            raise ParameterError(
                f"structure grid {grid} must divide the image shape ({h}, {w})"
            )
        ph, pw = h // grid, w // grid
        patches = (
            src.reshape(grid, ph, grid, pw, src.shape[2])
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid * grid, ph, pw, src.shape[2])
        )
        perm = rng.permutation(grid * grid)
        out = (
            patches[perm]
            .reshape(grid, grid, ph, pw, src.shape[2])
            .transpose(0, 2, 1, 3, 4)
            .reshape(h, w, src.shape[2])
        )
        if jitter:
            quarter_turns = int(rng.integers(0, 4))
            if h == w and quarter_turns:
                out = np.rot90(out, quarter_turns, axes=(0, 1))
            scale = rng.uniform(0.9, 1.1, size=src.shape[2]).astype(np.float32)
            out = np.clip(out * scale, 0.0, 1.0)
        return np.ascontiguousarray(out, dtype=np.float32)

    raise ParameterError(f"unknown noise kind: {kind!r}")


def blend(
    img: np.ndarray,
    noise: np.ndarray,
    mask: np.ndarray,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Opacity blend of ``noise`` into ``img`` inside ``mask``.

    Returns (masked_foreground, blended_image) where

        masked_foreground = delta * (mask * noise) + (1 - delta) * (mask * img)
        blended_image     = (1 - mask) * img + masked_foreground

    With delta == 0 the blended image equals the input bit-for-bit, and
    pixels outside the mask are never modified.
    """
    if img.shape != noise.shape:
        raise ParameterError(
            f"image and noise shapes differ: {img.shape} vs {noise.shape}"
        )
    if mask.shape != img.shape[:2]:
        raise ParameterError(
            f"mask shape {mask.shape} does not match image {img.shape[:2]}"
        )
    if not (0.0 <= delta <= 1.0):
        raise ParameterError(f"delta must lie in [0, 1], got {delta}")
    m = (np.asarray(mask) > 0).astype(img.dtype)[..., None]
    d = img.dtype.type(delta)
    one = img.dtype.type(1.0)
    masked_fg = d * (m * noise) + (one - d) * (m * img)
    blended = (one - m) * img + masked_fg
    np.clip(blended, 0.0, 1.0, out=blended)
    return masked_fg, blended


def _frequency_choices(extent: int, min_exp: int, max_exp: int) -> list[int]:
    """Powers of two in [2^min_exp, 2^max_exp] that divide ``extent``."""
    out = [2**e for e in range(min_exp, max_exp + 1) if extent % (2**e) == 0]
    return out or [1]


def simulate(
    img: np.ndarray,
    cfg: SimConfig,
    texture_pool: list[np.ndarray],
    rng: np.random.Generator,
) -> SimulatedSample:
    """Produce one synthetic anomaly from a defect-free image.

    The blob mask is redrawn up to ``cfg.max_mask_retries`` times when it
    comes out empty (e.g. the foreground estimate suppressed it); if every
    attempt is empty the sample is returned unmodified with ``degenerate``
    set, so callers can treat it as a normal sample.
    """
    cfg.validate()
    h, w = img.shape[:2]
    if cfg.use_foreground_mask:
        fg = foreground_mask(img, cfg.bg_threshold, cfg.bg_invert)
    else:
        fg = np.ones((h, w), dtype=np.uint8)

    fy_choices = _frequency_choices(h, cfg.perlin_min_exp, cfg.perlin_max_exp)
    fx_choices = _frequency_choices(w, cfg.perlin_min_exp, cfg.perlin_max_exp)
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(cfg.max_mask_retries):
        fy = int(rng.choice(fy_choices))
        fx = int(rng.choice(fx_choices))
        field = perlin2d(h, w, (fy, fx), rng)
        mask = compose_mask(fg, perlin_mask(field, cfg.perlin_threshold))
        if mask.any():
            break
    degenerate = not bool(mask.any())

    if texture_pool and rng.uniform() < cfg.texture_prob:
        kind = "texture"
    else:
        kind = "structure"
    noise = make_noise_image(
        img, kind, texture_pool, rng, grid=cfg.structure_grid
    )
    delta = float(rng.uniform(cfg.delta_range[0], cfg.delta_range[1]))
    _, blended = blend(img, noise, mask, delta)
    return SimulatedSample(
        image=blended,
        mask=mask,
        delta=delta,
        noise_kind=kind,
        degenerate=degenerate,
    )


def with_delta_range(cfg: SimConfig, lo: float, hi: float) -> SimConfig:
    """Copy of ``cfg`` with a different blend-opacity range."""
    return replace(cfg, delta_range=(lo, hi))
