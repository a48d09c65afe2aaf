"""Dataset indexing, image/mask IO, photometric perturbation, heatmap export.

Datasets follow the industrial-inspection directory convention:

    <root>/<category>/train/good/*.png          defect-free training images
    <root>/<category>/test/<kind>/*.png          test images ("good" = normal)
    <root>/<category>/ground_truth/<kind>/*.png  binary masks for defective test images

Images are represented as float32 arrays of shape (H, W, 3) with values in
[0, 1]; masks as uint8 arrays of shape (H, W) with values in {0, 1}.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DatasetLayoutError, ImageFileError, ParameterError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

#: Default photometric perturbation ranges applied at batch assembly.
DEFAULT_SIGMA_RANGE = (0.0, 0.05)
DEFAULT_CONTRAST_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class TestItem:
    """One test image: its path, binary label, and optional mask path."""

    path: Path
    label: int  # 0 = normal, 1 = anomalous
    mask_path: Path | None = None


@dataclass
class DatasetIndex:
    """Deterministic enumeration of one dataset category."""

    root: Path
    category: str
    train_normals: list[Path] = field(default_factory=list)
    test_items: list[TestItem] = field(default_factory=list)

    @property
    def n_test_normal(self) -> int:
        return sum(1 for t in self.test_items if t.label == 0)

    @property
    def n_test_anomalous(self) -> int:
        return sum(1 for t in self.test_items if t.label == 1)


def _list_images(directory: Path) -> list[Path]:
    """All image files directly under ``directory``, lexicographically sorted."""
    out = [
        p
        for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return sorted(out, key=lambda p: p.name)


def _find_mask(gt_dir: Path, kind: str, stem: str) -> Path | None:
    """Locate the ground-truth mask for test image ``kind/stem``."""
    base = gt_dir / kind
    for candidate in (base / f"{stem}_mask.png", base / f"{stem}.png"):
        if candidate.is_file():
            return candidate
    return None


def load_dataset(root: str | os.PathLike, category: str) -> DatasetIndex:
    """Index one category directory.

    Raises:
        DatasetLayoutError: if the expected subdirectories are missing or the
            training split contains no images.  The message names the path.
    """
    base = Path(root) / category
    train_good = base / "train" / "good"
    test_dir = base / "test"
    if not train_good.is_dir():
        raise DatasetLayoutError(f"missing training directory: {train_good}")
    if not test_dir.is_dir():
        raise DatasetLayoutError(f"missing test directory: {test_dir}")

    train_normals = _list_images(train_good)
    if not train_normals:
        raise DatasetLayoutError(f"no training images under {train_good}")

    gt_dir = base / "ground_truth"
    test_items: list[TestItem] = []
    for kind_dir in sorted(
        (d for d in test_dir.iterdir() if d.is_dir()), key=lambda d: d.name
    ):
        kind = kind_dir.name
        for img_path in _list_images(kind_dir):
            if kind == "good":
                test_items.append(TestItem(img_path, 0, None))
            else:
                mask = _find_mask(gt_dir, kind, img_path.stem)
                test_items.append(TestItem(img_path, 1, mask))
    return DatasetIndex(
        root=Path(root),
        category=category,
        train_normals=train_normals,
        test_items=test_items,
    )


def load_image(path: str | os.PathLike, target_size: int) -> np.ndarray:
    """Load an image as float32 RGB in [0, 1], resized to a square.

    Grayscale inputs are replicated across the three channels; resizing is
    bilinear.
    """
    if target_size < 1:
        raise ParameterError(f"target_size must be >= 1, got {target_size}")
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            if im.size != (target_size, target_size):
                im = im.resize((target_size, target_size), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot read image {path}: {exc}") from exc
    return arr


def load_mask(path: str | os.PathLike, target_size: int) -> np.ndarray:
    """Load a binary mask as uint8 {0, 1}, resized with nearest-neighbor.

    Any nonzero source pixel counts as anomalous.
    """
    if target_size < 1:
        raise ParameterError(f"target_size must be >= 1, got {target_size}")
    try:
        with PILImage.open(path) as im:
            im = im.convert("L")
            if im.size != (target_size, target_size):
                im = im.resize((target_size, target_size), PILImage.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def perturb(
    img: np.ndarray,
    sigma: float,
    contrast: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Photometric perturbation: contrast stretch about 0.5 plus Gaussian noise.

    Computes clip(contrast * (img - 0.5) + 0.5 + noise, 0, 1) where noise is
    N(0, sigma^2) per pixel.  With sigma == 0 and contrast == 1 the output
    equals the input exactly (both stages are skipped, so no floating-point
    drift is introduced).
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if contrast <= 0:
        raise ParameterError(f"contrast must be > 0, got {contrast}")
    out = img
    if contrast != 1.0:
        out = np.float32(contrast) * (out - np.float32(0.5)) + np.float32(0.5)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def export_heatmap(heatmap: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] heatmap as a 16-bit grayscale PNG.

    Quantization to 16 bits keeps the round-trip error far below 1/255.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ParameterError(f"heatmap must be 2-D, got shape {hm.shape}")
    if not np.isfinite(hm).all():
        raise ParameterError("heatmap contains non-finite values")
    if hm.min() < -1e-6 or hm.max() > 1 + 1e-6:
        raise ParameterError(
            f"heatmap values must lie in [0, 1], got [{hm.min()}, {hm.max()}]"
        )
    hm = np.clip(hm, 0.0, 1.0)
    quantized = np.round(hm * 65535.0).astype(np.uint16)
    try:
        PILImage.fromarray(quantized).save(path, format="PNG")
    except OSError as exc:
        raise ImageFileError(f"cannot write heatmap {path}: {exc}") from exc


def load_heatmap(path: str | os.PathLike) -> np.ndarray:
    """Read back a heatmap written by :func:`export_heatmap`."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageFileError(f"cannot read heatmap {path}: {exc}") from exc
    return arr / 65535.0


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a float [0, 1] RGB image as an 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    try:
        PILImage.fromarray(data).save(path, format="PNG")
    except OSError as exc:
        raise ImageFileError(f"cannot write image {path}: {exc}") from exc


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a {0, 1} mask as an 8-bit black/white PNG."""
    data = (np.asarray(mask) > 0).astype(np.uint8) * np.uint8(255)
    try:
        PILImage.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise ImageFileError(f"cannot write mask {path}: {exc}") from exc
