"""Scoring a trained model on a test split and ranking-based metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .errors import ParameterError, UndefinedMetricError


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # positions i..j (0-based) share rank mean(i+1 .. j+1)
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Ties between a positive and a negative score contribute 1/2.  Raises
    :class:`UndefinedMetricError` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ParameterError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise UndefinedMetricError("auroc of an empty sample is undefined")
    if not np.isfinite(s).all():
        raise ParameterError("scores must be finite")
    pos = y == 1
    neg = y == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos + n_neg != s.size:
        raise ParameterError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            "auroc needs both classes; got "
            f"{n_pos} positive and {n_neg} negative samples"
        )
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalRecord:
    """Score of one test image."""

    path: str
    label: int
    score: float


@dataclass
class EvalResult:
    """Image-level evaluation of one category."""

    category: str
    auroc: float
    n_normal: int
    n_anomalous: int
    records: list[EvalRecord] = field(default_factory=list)
    pixel_auroc: float | None = None


def evaluate(
    model,
    bank,
    index: dataio.DatasetIndex,
    image_size: int,
    heatmap_dir: str | Path | None = None,
    pixel_metrics: bool = False,
    progress=None,
) -> EvalResult:
    """Score every test image and compute the image-level AUROC.

    ``heatmap_dir`` (optional) receives one 16-bit grayscale PNG per test
    image.  ``pixel_metrics`` additionally computes a pixel-level AUROC over
    ground-truth masks (missing masks of anomalous items are skipped;
    normal items count as all-background).
    """
    records: list[EvalRecord] = []
    scores: list[float] = []
    labels: list[int] = []
    pixel_scores: list[np.ndarray] = []
    pixel_labels: list[np.ndarray] = []
    if heatmap_dir is not None:
        heatmap_dir = Path(heatmap_dir)
        heatmap_dir.mkdir(parents=True, exist_ok=True)

    for pos, item in enumerate(index.test_items):
        img = dataio.load_image(item.path, image_size)
        seg, image_score, _ = model.forward(img, bank)
        records.append(EvalRecord(str(item.path), item.label, image_score))
        scores.append(image_score)
        labels.append(item.label)
        if heatmap_dir is not None:
            name = f"{pos:04d}_{Path(item.path).stem}.png"
            dataio.export_heatmap(np.clip(seg, 0.0, 1.0), heatmap_dir / name)
        if pixel_metrics:
            if item.label == 0:
                mask = np.zeros(seg.shape, dtype=np.uint8)
            elif item.mask_path is not None:
                mask = dataio.load_mask(item.mask_path, image_size)
            else:
                mask = None
            if mask is not None:
                pixel_scores.append(seg.ravel())
                pixel_labels.append(mask.ravel())
        if progress is not None:
            progress(f"eval {pos + 1}/{len(index.test_items)}: {item.path}")

    result = EvalResult(
        category=index.category,
        auroc=auroc(np.array(scores), np.array(labels)),
        n_normal=sum(1 for y in labels if y == 0),
        n_anomalous=sum(1 for y in labels if y == 1),
        records=records,
    )
    if pixel_metrics and pixel_scores:
        flat_s = np.concatenate(pixel_scores)
        flat_y = np.concatenate(pixel_labels)
        if flat_s.size > 500_000:  # decimate deterministically
            stride = int(np.ceil(flat_s.size / 500_000))
            flat_s = flat_s[::stride]
            flat_y = flat_y[::stride]
        if len(np.unique(flat_y)) == 2:
            result.pixel_auroc = auroc(flat_s, flat_y)
    return result


def write_records_csv(result: EvalResult, path: str | Path) -> None:
    """Per-image scores as CSV: path, label, score."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "score"])
        for rec in result.records:
            writer.writerow([rec.path, rec.label, repr(rec.score)])


def results_table(rows: list[tuple[str, float]]) -> str:
    """Text table with one column per category and the unweighted mean last.

    ``rows`` holds (category, auroc) pairs; the returned string has a header
    line and a value line, values printed with four decimals.
    """
    if not rows:
        raise ParameterError("results_table needs at least one row")
    names = [name for name, _ in rows] + ["average"]
    values = [value for _, value in rows]
    values.append(table_average(values))
    widths = [max(len(n), 7) for n in names]
    header = "  ".join(n.rjust(w) for n, w in zip(names, widths))
    line = "  ".join(f"{v:.4f}".rjust(w) for v, w in zip(values, widths))
    return header + "\n" + line


def table_average(values: list[float]) -> float:
    """Unweighted mean used for the table's final column."""
    if not values:
        raise ParameterError("cannot average zero values")
    return float(np.mean(values))


def write_results_csv(rows: list[tuple[str, float]], path: str | Path) -> None:
    """Category AUROCs plus the unweighted average as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "auroc"])
        for name, value in rows:
            writer.writerow([name, repr(value)])
        writer.writerow(["average", repr(table_average([v for _, v in rows]))])
