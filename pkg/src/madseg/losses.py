"""Composite training objective.

Pixel supervision combines an L1 term with a focal term over the predicted
segmentation map; image supervision is binary cross-entropy on the logistic
image score, split into a labeled part (known targets) and a pseudo-labeled
part that simply skips samples the labeling committee marked unknown.  All
terms are means over their included elements.

Each cross-entropy style term exists in two algebraically equivalent forms: a
probability form (log arguments clamped away from zero, convenient for
verification against hand-worked values) and a logit form built on softplus.
Training uses the logit forms: once a probability saturates to exactly 0 or 1
in float32, the clamped-log gradient is exactly zero and a pixel can never
recover, whereas ``softplus(-z)`` keeps a finite, non-vanishing gradient for
any finite logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ParameterError

#: Probability clamp applied inside every logarithm.
EPS = 1e-7


@dataclass
class LossWeights:
    """Weights and focal parameters of the pixel objective."""

    w_l1: float = 0.6
    w_focal: float = 0.4
    gamma: float = 4.0
    alpha: float = 0.25

    def validate(self) -> None:
        if self.w_l1 < 0 or self.w_focal < 0:
            raise ParameterError(
                f"loss weights must be >= 0, got ({self.w_l1}, {self.w_focal})"
            )
        if self.gamma < 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if not (0.0 < self.alpha <= 1.0):
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass
class LossReport:
    """Scalar values of every term for one training step."""

    l1: float
    focal: float
    seg: float
    bce_labeled: float
    bce_pseudo: float
    total: float
    n_pseudo_used: int
    n_pseudo_unknown: int

    CSV_FIELDS = (
        "l1",
        "focal",
        "seg",
        "bce_labeled",
        "bce_pseudo",
        "total",
        "n_pseudo_used",
        "n_pseudo_unknown",
    )


def _check_same_shape(target: torch.Tensor, pred: torch.Tensor) -> None:
    if target.shape != pred.shape:
        raise ParameterError(
            f"target shape {tuple(target.shape)} does not match "
            f"prediction shape {tuple(pred.shape)}"
        )


def l1_term(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between mask and predicted map."""
    _check_same_shape(target, pred)
    return (target - pred).abs().mean()


def focal_term(
    target: torch.Tensor,
    pred: torch.Tensor,
    gamma: float,
    alpha: float,
) -> torch.Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t).

    ``p_t`` is the predicted probability of the true class per pixel.  With
    gamma == 0 this reduces to alpha-scaled binary cross-entropy.
    """
    _check_same_shape(target, pred)
    p = pred.clamp(EPS, 1.0 - EPS)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    return (-alpha * (1.0 - p_t) ** gamma * p_t.log()).mean()


def focal_term_logits(
    target: torch.Tensor,
    logits: torch.Tensor,
    gamma: float,
    alpha: float,
) -> torch.Tensor:
    """``focal_term`` computed from pre-sigmoid values.

    Uses ``-log p_t = softplus(-z_t)`` so the value matches the probability
    form while the gradient stays alive for arbitrarily large logits.
    """
    _check_same_shape(target, logits)
    positive = target > 0.5
    p = torch.sigmoid(logits)
    p_t = torch.where(positive, p, 1.0 - p)
    nll = torch.nn.functional.softplus(torch.where(positive, -logits, logits))
    return (alpha * (1.0 - p_t) ** gamma * nll).mean()


def seg_term(
    target: torch.Tensor, pred: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """Weighted sum of the pixel terms."""
    return weights.w_l1 * l1_term(target, pred) + weights.w_focal * focal_term(
        target, pred, weights.gamma, weights.alpha
    )


def seg_term_logits(
    target: torch.Tensor, logits: torch.Tensor, weights: LossWeights
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pixel objective from logits: (l1, focal, weighted sum)."""
    l1 = l1_term(target, torch.sigmoid(logits))
    focal = focal_term_logits(target, logits, weights.gamma, weights.alpha)
    return l1, focal, weights.w_l1 * l1 + weights.w_focal * focal


def bce_scores(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of probability scores against 0/1 targets.

    An empty input contributes exactly zero.
    """
    if scores.numel() != targets.numel():
        raise ParameterError(
            f"{scores.numel()} scores vs {targets.numel()} targets"
        )
    if scores.numel() == 0:
        return torch.zeros((), dtype=scores.dtype)
    s = scores.clamp(EPS, 1.0 - EPS)
    t = targets.to(s.dtype)
    return -(t * s.log() + (1.0 - t) * (1.0 - s).log()).mean()


def bce_scores_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``bce_scores`` computed from pre-sigmoid scores.

    The standard stable form ``softplus(z) - z * t`` equals
    ``-[t log s + (1 - t) log (1 - s)]`` for ``s = sigmoid(z)``.
    """
    if logits.numel() != targets.numel():
        raise ParameterError(
            f"{logits.numel()} scores vs {targets.numel()} targets"
        )
    if logits.numel() == 0:
        return torch.zeros((), dtype=logits.dtype)
    t = targets.to(logits.dtype)
    return (torch.nn.functional.softplus(logits) - logits * t).mean()


def bce_pseudo(scores: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """BCE over pseudo-labeled samples, skipping the unknown (-1) ones."""
    if scores.numel() != pseudo_labels.numel():
        raise ParameterError(
            f"{scores.numel()} scores vs {pseudo_labels.numel()} pseudo labels"
        )
    keep = pseudo_labels >= 0
    if int(keep.sum()) == 0:
        return torch.zeros((), dtype=scores.dtype)
    return bce_scores(scores[keep], pseudo_labels[keep])


def bce_pseudo_logits(
    logits: torch.Tensor, pseudo_labels: torch.Tensor
) -> torch.Tensor:
    """``bce_pseudo`` computed from pre-sigmoid scores."""
    if logits.numel() != pseudo_labels.numel():
        raise ParameterError(
            f"{logits.numel()} scores vs {pseudo_labels.numel()} pseudo labels"
        )
    keep = pseudo_labels >= 0
    if int(keep.sum()) == 0:
        return torch.zeros((), dtype=logits.dtype)
    return bce_scores_logits(logits[keep], pseudo_labels[keep])


def total_term(
    seg: torch.Tensor, bce_labeled: torch.Tensor, bce_u: torch.Tensor
) -> torch.Tensor:
    """Sum of the three objective components."""
    return seg + bce_labeled + bce_u


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def make_report(
    l1: torch.Tensor,
    focal: torch.Tensor,
    seg: torch.Tensor,
    bce_labeled: torch.Tensor,
    bce_u: torch.Tensor,
    total: torch.Tensor,
    n_pseudo_used: int,
    n_pseudo_unknown: int,
) -> LossReport:
    return LossReport(
        l1=_scalar(l1),
        focal=_scalar(focal),
        seg=_scalar(seg),
        bce_labeled=_scalar(bce_labeled),
        bce_pseudo=_scalar(bce_u),
        total=_scalar(total),
        n_pseudo_used=n_pseudo_used,
        n_pseudo_unknown=n_pseudo_unknown,
    )
