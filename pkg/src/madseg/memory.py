"""Memory bank of normal-feature pyramids and difference/attention ops.

The bank stores multi-scale encodings of a fixed set of defect-free images.
At inference/training time an input's pyramid is compared against every
stored entry; the entry with the smallest total absolute difference supplies
the "difference information" that is concatenated onto the input features
and condensed into multiplicative spatial attention maps.

Single-sample ops follow the reference definitions literally; the batched
variants are vectorized twins used on the training path, and tests assert
they agree elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, ParameterError


class FeaturePyramid(NamedTuple):
    """Encoder features: stem map plus the three memory-compared scales.

    For an input of side S the shapes are f0: (w, S/2, S/2),
    f1: (2w, S/4, S/4), f2: (4w, S/8, S/8), f3: (8w, S/16, S/16) with width
    multiplier w.  Batched pyramids carry a leading batch dimension.
    """

    f0: torch.Tensor
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor


class DiffPyramid(NamedTuple):
    """Elementwise |memory - input| at the three compared scales."""

    d1: torch.Tensor
    d2: torch.Tensor
    d3: torch.Tensor

    def total(self) -> float:
        return float(self.d1.sum() + self.d2.sum() + self.d3.sum())


class AttentionMaps(NamedTuple):
    """Per-scale spatial attention maps (no channel axis)."""

    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor


@dataclass
class MemoryBank:
    """Stacked feature pyramids of N defect-free images (constants)."""

    f1: torch.Tensor  # (N, 2w, S/4, S/4)
    f2: torch.Tensor  # (N, 4w, S/8, S/8)
    f3: torch.Tensor  # (N, 8w, S/16, S/16)

    def __post_init__(self) -> None:
        if self.f1.shape[0] != self.f2.shape[0] or self.f1.shape[0] != self.f3.shape[0]:
            raise ParameterError("memory bank scales disagree on entry count")
        if self.f1.shape[0] < 1:
            raise ConfigurationError("memory bank must hold at least one entry")

    @property
    def n(self) -> int:
        return int(self.f1.shape[0])

    def entry(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.f1[i], self.f2[i], self.f3[i]


def build_memory(
    images: Sequence[np.ndarray],
    encoder,
    n: int,
    rng: np.random.Generator,
) -> MemoryBank:
    """Encode ``n`` images chosen uniformly without replacement (seeded).

    ``encoder`` is any object with an ``encode_image(img) -> FeaturePyramid``
    method; gradients are never tracked through bank entries.
    """
    if n < 1:
        raise ParameterError(f"memory size must be >= 1, got {n}")
    if len(images) < n:
        raise ConfigurationError(
            f"memory size {n} exceeds the {len(images)} available normal images"
        )
    chosen = rng.choice(len(images), size=n, replace=False)
    f1s, f2s, f3s = [], [], []
    with torch.no_grad():
        for idx in chosen:
            pyr = encoder.encode_image(images[int(idx)])
            f1s.append(pyr.f1.detach())
            f2s.append(pyr.f2.detach())
            f3s.append(pyr.f3.detach())
    return MemoryBank(
        f1=torch.stack(f1s), f2=torch.stack(f2s), f3=torch.stack(f3s)
    )


def diff_all(x: FeaturePyramid, bank: MemoryBank) -> list[DiffPyramid]:
    """Absolute difference pyramids between ``x`` and every bank entry."""
    _check_scales(x, bank)
    out = []
    for i in range(bank.n):
        m1, m2, m3 = bank.entry(i)
        out.append(
            DiffPyramid(
                d1=(m1 - x.f1).abs(),
                d2=(m2 - x.f2).abs(),
                d3=(m3 - x.f3).abs(),
            )
        )
    return out


def select_best_index(diffs: Sequence[DiffPyramid]) -> int:
    """Index of the entry with the smallest summed difference.

    Ties break toward the lowest index (python ``min`` is stable).
    """
    if not diffs:
        raise ParameterError("cannot select from an empty difference list")
    sums = [d.total() for d in diffs]
    return min(range(len(sums)), key=lambda i: sums[i])


def select_best(diffs: Sequence[DiffPyramid]) -> DiffPyramid:
    """The difference pyramid of the closest bank entry."""
    return diffs[select_best_index(diffs)]


def concat_info(x: FeaturePyramid, best: DiffPyramid) -> tuple[torch.Tensor, ...]:
    """Per-scale channel concatenation [input features ; best differences].

    The first half of each output's channels equals the input features.
    """
    for a, b in ((x.f1, best.d1), (x.f2, best.d2), (x.f3, best.d3)):
        if a.shape != b.shape:
            raise ParameterError(
                f"feature/difference shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
    return (
        torch.cat([x.f1, best.d1], dim=-3),
        torch.cat([x.f2, best.d2], dim=-3),
        torch.cat([x.f3, best.d3], dim=-3),
    )


def _upsample2(m: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor x2 upsampling of the two trailing dims."""
    return m.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def attention_maps(best: DiffPyramid) -> AttentionMaps:
    """Condense a difference pyramid into cascaded spatial attention maps.

    The coarsest map is the channel mean of d3; each finer map is its scale's
    channel mean gated by the upsampled coarser map.  All values are >= 0.
    """
    m3 = best.d3.mean(dim=-3)
    m2 = best.d2.mean(dim=-3) * _upsample2(m3)
    m1 = best.d1.mean(dim=-3) * _upsample2(m2)
    return AttentionMaps(m1=m1, m2=m2, m3=m3)


def batch_best_diff(
    f1: torch.Tensor,
    f2: torch.Tensor,
    f3: torch.Tensor,
    bank: MemoryBank,
) -> tuple[DiffPyramid, list[int]]:
    """Best-entry difference pyramids for a whole batch.

    Two passes keep memory bounded: the summed difference of every
    (item, entry) pair is computed entry-by-entry, then the winning entry's
    differences are materialized.  Ties break toward the lowest entry index,
    matching :func:`select_best_index`.
    """
    bsz = f1.shape[0]
    sums = torch.empty((bsz, bank.n), dtype=f1.dtype)
    for i in range(bank.n):
        m1, m2, m3 = bank.entry(i)
        sums[:, i] = (
            (m1.unsqueeze(0) - f1).abs().sum(dim=(1, 2, 3))
            + (m2.unsqueeze(0) - f2).abs().sum(dim=(1, 2, 3))
            + (m3.unsqueeze(0) - f3).abs().sum(dim=(1, 2, 3))
        )
    sums_np = sums.detach().cpu().numpy()
    indices = [
        min(range(bank.n), key=lambda i: sums_np[b, i]) for b in range(bsz)
    ]
    idx = torch.as_tensor(indices, dtype=torch.long)
    best = DiffPyramid(
        d1=(bank.f1[idx] - f1).abs(),
        d2=(bank.f2[idx] - f2).abs(),
        d3=(bank.f3[idx] - f3).abs(),
    )
    return best, indices


def _check_scales(x: FeaturePyramid, bank: MemoryBank) -> None:
    for name, feat, stored in (
        ("f1", x.f1, bank.f1),
        ("f2", x.f2, bank.f2),
        ("f3", x.f3, bank.f3),
    ):
        if tuple(feat.shape[-3:]) != tuple(stored.shape[-3:]):
            raise ParameterError(
                f"{name} shape {tuple(feat.shape[-3:])} does not match "
                f"memory entries {tuple(stored.shape[-3:])}"
            )
