"""Ensemble pseudo-labeling of simulated samples.

A small committee of one-class scorers (diagonal-covariance Gaussian
mixtures) is fitted on disjoint subsets of projected latent vectors.  Each
scorer gets a pair of decision thresholds chosen to minimize the 1-D
Wasserstein distance between the scores of a small labeled set and the
scores of the threshold-conditioned simulated set.  A sample is labeled
anomalous only when every scorer agrees it is above its upper threshold,
normal only when every scorer agrees it is below its lower threshold, and
unknown otherwise.  Unknown samples are excluded from the supervised loss.

Everything here is plain numpy and deterministic given the supplied
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError

#: Lower bound applied to every mixture variance (keeps scores finite even
#: on degenerate, e.g. all-identical, training sets).
MIN_VARIANCE = 1e-6

LABEL_ANOMALOUS = 1
LABEL_NORMAL = 0
LABEL_UNKNOWN = -1


# --------------------------------------------------------------------------
# Gaussian mixture one-class scorer
# --------------------------------------------------------------------------
@dataclass
class MixtureScorer:
    """Diagonal-covariance Gaussian mixture used as a one-class scorer.

    The score of a vector is its negative log-likelihood, so larger scores
    mean less typical of the fitted data.  The score is invariant under any
    permutation of the components.
    """

    weights: np.ndarray  # (J,)
    means: np.ndarray  # (J, D)
    variances: np.ndarray  # (J, D), all >= MIN_VARIANCE

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.variances.min() <= 0:
            raise ParameterError("mixture variances must be positive")

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """Per-row log density of an (n, D) matrix under the mixture."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        # (n, J): log w_j + sum_d log N(x_d; mu_jd, var_jd)
        diff = x[:, None, :] - self.means[None, :, :]
        comp = (
            -0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)[None, :]
            - 0.5 * np.sum(diff * diff / self.variances[None, :, :], axis=2)
        )
        comp = comp + np.log(self.weights)[None, :]
        peak = comp.max(axis=1, keepdims=True)
        return (peak + np.log(np.exp(comp - peak).sum(axis=1, keepdims=True)))[:, 0]

    def score(self, x: np.ndarray) -> float:
        """Negative log-likelihood of a single vector."""
        return float(-self.log_likelihood(np.atleast_2d(x))[0])

    def score_many(self, x: np.ndarray) -> np.ndarray:
        """Negative log-likelihoods of an (n, D) matrix, shape (n,)."""
        return -self.log_likelihood(x)


def _kmeans_init(
    x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10
) -> np.ndarray:
    """Seeded Lloyd iterations used to initialize the EM responsibilities."""
    n = x.shape[0]
    centers = x[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members) == 0:
                centers[j] = x[int(rng.integers(0, n))]
            else:
                centers[j] = members.mean(axis=0)
    return centers


def fit_mixture(
    features: np.ndarray,
    components: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> MixtureScorer:
    """Fit a diagonal-covariance Gaussian mixture by EM.

    Initialization is a short seeded k-means; iteration stops when the mean
    log-likelihood improves by less than ``tol`` or after ``max_iter``
    rounds.  Every variance is floored at ``MIN_VARIANCE`` (a hard floor,
    not an additive regularizer), so the single-component fit of a two-point
    set {(0,0),(2,2)} gives exactly mean (1,1) and variance (1,1).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if components < 1:
        raise ParameterError(f"components must be >= 1, got {components}")
    if n < components:
        raise ParameterError(
            f"need at least {components} samples to fit {components} components, got {n}"
        )
    if max_iter < 1:
        raise ParameterError(f"max_iter must be >= 1, got {max_iter}")

    centers = _kmeans_init(x, components, rng)
    weights = np.full(components, 1.0 / components)
    means = centers
    global_var = np.maximum(x.var(axis=0), MIN_VARIANCE)
    variances = np.tile(global_var, (components, 1))

    prev_ll = -np.inf
    for _ in range(max_iter):
        diff = x[:, None, :] - means[None, :, :]
        log_comp = (
            np.log(weights)[None, :]
            - 0.5 * np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
            - 0.5 * np.sum(diff * diff / variances[None, :, :], axis=2)
        )
        peak = log_comp.max(axis=1, keepdims=True)
        log_norm = peak + np.log(np.exp(log_comp - peak).sum(axis=1, keepdims=True))
        resp = np.exp(log_comp - log_norm)
        ll = float(log_norm.mean())

        counts = resp.sum(axis=0)
        counts = np.maximum(counts, 1e-12)
        weights = counts / counts.sum()
        means = (resp.T @ x) / counts[:, None]
        second = (resp.T @ (x * x)) / counts[:, None]
        variances = np.maximum(second - means * means, MIN_VARIANCE)

        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    return MixtureScorer(weights, means, variances)


# --------------------------------------------------------------------------
# 1-D Wasserstein distance and threshold search
# --------------------------------------------------------------------------
def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """First Wasserstein distance between two empirical 1-D distributions.

    Computed as the integral of |F_a - F_b| over the merged support
    (piecewise-constant CDFs).  For equal sample counts this equals the mean
    absolute difference of the sorted samples.  Symmetric, non-negative, and
    zero exactly when the multisets coincide.
    """
    av = np.sort(np.asarray(a, dtype=np.float64).ravel())
    bv = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if av.size == 0 or bv.size == 0:
        raise ParameterError("wasserstein_1d requires non-empty samples")
    merged = np.sort(np.concatenate([av, bv]))
    widths = np.diff(merged)
    if widths.size == 0:
        return 0.0
    cdf_a = np.searchsorted(av, merged[:-1], side="right") / av.size
    cdf_b = np.searchsorted(bv, merged[:-1], side="right") / bv.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def threshold_candidates(sim_scores: np.ndarray) -> np.ndarray:
    """Candidate thresholds: midpoints of consecutive distinct scores plus
    finite guards one unit beyond each end of the observed range."""
    sv = np.unique(np.asarray(sim_scores, dtype=np.float64).ravel())
    if sv.size == 0:
        raise ParameterError("sim_scores must be non-empty")
    mids = (sv[1:] + sv[:-1]) / 2.0
    return np.concatenate([[sv[0] - 1.0], mids, [sv[-1] + 1.0]])


def select_threshold(
    side: str,
    labeled_scores: np.ndarray,
    sim_scores: np.ndarray,
) -> float:
    """Threshold minimizing the Wasserstein distance to the conditioned set.

    ``side == "positive"`` conditions on scores strictly above the
    threshold, ``side == "negative"`` on scores strictly below it.
    Candidates that condition an empty set are skipped.  Ties break toward
    the smallest threshold on the positive side and the largest on the
    negative side.
    """
    if side not in ("positive", "negative"):
        raise ParameterError(f"side must be 'positive' or 'negative', got {side!r}")
    labeled = np.asarray(labeled_scores, dtype=np.float64).ravel()
    sims = np.asarray(sim_scores, dtype=np.float64).ravel()
    if labeled.size == 0:
        raise ParameterError("labeled_scores must be non-empty")
    best_eta: float | None = None
    best_w = np.inf
    for eta in threshold_candidates(sims):
        subset = sims[sims > eta] if side == "positive" else sims[sims < eta]
        if subset.size == 0:
            continue
        w = wasserstein_1d(labeled, subset)
        if side == "positive":
            better = w < best_w
        else:
            better = w <= best_w  # ascending scan, so <= keeps the largest
        if best_eta is None or better:
            best_eta, best_w = float(eta), w
    if best_eta is None:
        raise ConfigurationError(
            "no threshold candidate leaves a non-empty conditioned set"
        )
    return best_eta


# --------------------------------------------------------------------------
# Label assignment and ensemble construction
# --------------------------------------------------------------------------
def assign_label(
    scores: np.ndarray,
    upper: np.ndarray,
    lower: np.ndarray,
    negative_against_upper: bool = False,
) -> int:
    """Unanimity vote: 1 above all uppers, 0 below all lowers, else -1.

    When both unanimity conditions hold simultaneously the sample stays
    unknown.  ``negative_against_upper`` switches the normal-side comparison
    to the upper thresholds (an alternative reading of the decision rule).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    up = np.asarray(upper, dtype=np.float64).ravel()
    low = np.asarray(lower, dtype=np.float64).ravel()
    if s.size != up.size or s.size != low.size:
        raise ParameterError(
            f"scores ({s.size}), upper ({up.size}) and lower ({low.size}) "
            "must have equal lengths"
        )
    negative_ref = up if negative_against_upper else low
    is_pos = bool(np.all(s > up))
    is_neg = bool(np.all(s < negative_ref))
    if is_pos and is_neg:
        return LABEL_UNKNOWN
    if is_pos:
        return LABEL_ANOMALOUS
    if is_neg:
        return LABEL_NORMAL
    return LABEL_UNKNOWN


def split_subsets(
    features: np.ndarray, k: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Random partition into ``k`` disjoint subsets with sizes differing <= 1."""
    x = np.asarray(features)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if x.shape[0] < k:
        raise ParameterError(
            f"cannot split {x.shape[0]} samples into {k} non-empty subsets"
        )
    perm = rng.permutation(x.shape[0])
    return [x[perm[i::k]] for i in range(k)]


def random_projection(d_in: int, d_out: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed random orthonormal projection matrix of shape (d_in, d_out).

    When the input dimension does not exceed the target, the identity is
    returned (no reduction needed).
    """
    if d_in < 1 or d_out < 1:
        raise ParameterError("projection dimensions must be >= 1")
    if d_in <= d_out:
        return np.eye(d_in, dtype=np.float64)
    gauss = rng.standard_normal((d_in, d_out))
    q, _ = np.linalg.qr(gauss)
    return q


@dataclass
class PseudoLabeler:
    """Committee of scorers with per-scorer decision thresholds."""

    scorers: list[MixtureScorer]
    upper: np.ndarray  # (K,) anomalous-side thresholds
    lower: np.ndarray  # (K,) normal-side thresholds
    projector: np.ndarray  # (D, D') applied to raw latents before scoring
    negative_against_upper: bool = False

    def __post_init__(self) -> None:
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        k = len(self.scorers)
        if self.upper.shape != (k,) or self.lower.shape != (k,):
            raise ParameterError(
                f"need one upper and one lower threshold per scorer ({k})"
            )
        if not (np.isfinite(self.upper).all() and np.isfinite(self.lower).all()):
            raise ParameterError("thresholds must be finite")

    @property
    def k(self) -> int:
        return len(self.scorers)

    def project(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.projector.shape[0]:
            raise ParameterError(
                f"feature dim {x.shape[1]} does not match projector input "
                f"{self.projector.shape[0]}"
            )
        return x @ self.projector

    def score_matrix(self, features: np.ndarray) -> np.ndarray:
        """(n, K) matrix of committee scores for raw latent vectors."""
        proj = self.project(features)
        return np.stack([s.score_many(proj) for s in self.scorers], axis=1)

    def label(self, feature: np.ndarray) -> int:
        return int(self.label_many(np.atleast_2d(feature))[0])

    def label_many(self, features: np.ndarray) -> np.ndarray:
        scores = self.score_matrix(features)
        return np.array(
            [
                assign_label(
                    row, self.upper, self.lower, self.negative_against_upper
                )
                for row in scores
            ],
            dtype=np.int64,
        )


def build_labeler(
    labeled_anomalous: np.ndarray,
    labeled_normal: np.ndarray,
    sim_features: np.ndarray,
    k: int,
    rng: np.random.Generator,
    projector: np.ndarray,
    components: int = 3,
    max_iter: int = 100,
    fit_includes_sim: bool = True,
    negative_against_upper: bool = False,
) -> PseudoLabeler:
    """Fit the committee and choose its thresholds.

    Each scorer trains on its own subset of the simulated features together
    with the labeled-normal set (or on the labeled-normal set alone when
    ``fit_includes_sim`` is False).  Upper thresholds match the conditioned
    simulated scores to the labeled-anomalous scores; lower thresholds match
    them to the labeled-normal scores.
    """
    pos = np.atleast_2d(np.asarray(labeled_anomalous, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(labeled_normal, dtype=np.float64))
    sims = np.atleast_2d(np.asarray(sim_features, dtype=np.float64))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ParameterError("labeled sets must be non-empty")
    if sims.shape[0] < k:
        raise ParameterError(
            f"need at least {k} simulated features to build {k} scorers"
        )

    proj_pos = pos @ projector
    proj_neg = neg @ projector
    proj_sims = sims @ projector

    subsets = split_subsets(proj_sims, k, rng)
    scorers: list[MixtureScorer] = []
    uppers: list[float] = []
    lowers: list[float] = []
    for subset in subsets:
        train = np.concatenate([subset, proj_neg]) if fit_includes_sim else proj_neg
        scorer = fit_mixture(train, components, rng, max_iter=max_iter)
        sim_scores = scorer.score_many(proj_sims)
        uppers.append(
            select_threshold("positive", scorer.score_many(proj_pos), sim_scores)
        )
        lowers.append(
            select_threshold("negative", scorer.score_many(proj_neg), sim_scores)
        )
        scorers.append(scorer)
    return PseudoLabeler(
        scorers=scorers,
        upper=np.array(uppers),
        lower=np.array(lowers),
        projector=np.asarray(projector, dtype=np.float64),
        negative_against_upper=negative_against_upper,
    )
