"""Mixture scoring, distribution matching, thresholds, and committee labels."""

import numpy as np
import pytest
from scipy import stats
from sklearn.mixture import GaussianMixture

from madseg.errors import ParameterError
from madseg.pseudolabel import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    LABEL_UNKNOWN,
    MIN_VARIANCE,
    MixtureScorer,
    PseudoLabeler,
    assign_label,
    build_labeler,
    fit_mixture,
    random_projection,
    select_threshold,
    split_subsets,
    threshold_candidates,
    wasserstein_1d,
)


def wasserstein_quantile_oracle(a, b):
    """W1 via exact inverse-CDF integration (independent of the CDF route)."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    n, m = len(a), len(b)
    qs = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    total = 0.0
    for q0, q1 in zip(qs[:-1], qs[1:]):
        qm = (q0 + q1) / 2
        xa = a[min(int(qm * n), n - 1)]
        xb = b[min(int(qm * m), m - 1)]
        total += abs(xa - xb) * (q1 - q0)
    return total


class TestMixtureScorer:
    def test_standard_normal_score_at_origin(self):
        """-log N(0 | 0, 1) equals ln(2*pi)/2."""
        scorer = MixtureScorer(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        np.testing.assert_allclose(scorer.score(np.array([0.0])), 0.5 * np.log(2 * np.pi))

    def test_matches_dense_gaussian_oracle(self):
        """Log-likelihood agrees with a direct mixture-density evaluation."""
        rng = np.random.default_rng(42)
        weights = np.array([0.3, 0.7])
        means = rng.normal(size=(2, 3))
        variances = rng.uniform(0.5, 2.0, size=(2, 3))
        scorer = MixtureScorer(weights, means, variances)
        x = rng.normal(size=(20, 3))
        dens = np.zeros(20)
        for w, mu, var in zip(weights, means, variances):
            comp = np.ones(20)
            for j in range(3):
                comp *= stats.norm.pdf(x[:, j], mu[j], np.sqrt(var[j]))
            dens += w * comp
        np.testing.assert_allclose(scorer.log_likelihood(x), np.log(dens), rtol=1e-10)

    def test_invariant_under_component_permutation(self):
        """Reordering mixture components leaves every score unchanged."""
        rng = np.random.default_rng(42)
        weights = np.array([0.2, 0.5, 0.3])
        means = rng.normal(size=(3, 2))
        variances = rng.uniform(0.5, 2.0, size=(3, 2))
        a = MixtureScorer(weights, means, variances)
        p = [2, 0, 1]
        b = MixtureScorer(weights[p], means[p], variances[p])
        x = rng.normal(size=(50, 2))
        np.testing.assert_allclose(a.score_many(x), b.score_many(x), rtol=1e-12)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ParameterError):
            MixtureScorer(np.array([1.0]), np.array([[0.0]]), np.array([[0.0]]))


class TestFitMixture:
    def test_single_component_closed_form(self):
        """One component on {(0,0), (2,2)} is exactly the sample moments."""
        x = np.array([[0.0, 0.0], [2.0, 2.0]])
        scorer = fit_mixture(x, 1, np.random.default_rng(42))
        np.testing.assert_array_equal(scorer.means, [[1.0, 1.0]])
        np.testing.assert_array_equal(scorer.variances, [[1.0, 1.0]])
        np.testing.assert_array_equal(scorer.weights, [1.0])

    def test_recovers_separated_clusters(self):
        """Fitted means agree with a library EM on well-separated data."""
        rng = np.random.default_rng(42)
        x = np.concatenate(
            [rng.normal(-4, 0.3, size=(150, 2)), rng.normal(4, 0.3, size=(150, 2))]
        )
        ours = fit_mixture(x, 2, np.random.default_rng(0))
        ref = GaussianMixture(
            2, covariance_type="diag", reg_covar=1e-9, random_state=0
        ).fit(x)
        ours_means = ours.means[np.argsort(ours.means[:, 0])]
        ref_means = ref.means_[np.argsort(ref.means_[:, 0])]
        np.testing.assert_allclose(ours_means, ref_means, atol=0.1)

    def test_identical_points_hit_variance_floor(self):
        """Collapsed data keeps variances at the floor and scores finite."""
        x = np.full((10, 3), 0.7)
        scorer = fit_mixture(x, 2, np.random.default_rng(42))
        np.testing.assert_array_equal(scorer.variances, MIN_VARIANCE)
        assert np.isfinite(scorer.score_many(x)).all()

    def test_deterministic_given_rng(self):
        rng_data = np.random.default_rng(42)
        x = rng_data.normal(size=(60, 4))
        a = fit_mixture(x, 3, np.random.default_rng(7))
        b = fit_mixture(x, 3, np.random.default_rng(7))
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.variances, b.variances)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_rejects_too_few_samples(self):
        with pytest.raises(ParameterError):
            fit_mixture(np.zeros((2, 2)), 3, np.random.default_rng(0))


class TestWasserstein:
    def test_frozen_example(self):
        """{0,1} vs {1,2} are unit-shifted, so the distance is exactly 1."""
        assert wasserstein_1d(np.array([0.0, 1.0]), np.array([1.0, 2.0])) == 1.0

    def test_matches_quantile_oracle(self):
        """CDF-area route equals inverse-CDF integration on random pairs."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            a = rng.normal(size=rng.integers(1, 40))
            b = rng.normal(size=rng.integers(1, 40)) + rng.normal()
            np.testing.assert_allclose(
                wasserstein_1d(a, b), wasserstein_quantile_oracle(a, b), atol=1e-9
            )

    def test_matches_scipy(self):
        """Agrees with the scipy implementation on uneven samples."""
        rng = np.random.default_rng(42)
        for _ in range(50):
            a = rng.uniform(-5, 5, size=rng.integers(1, 30))
            b = rng.uniform(-5, 5, size=rng.integers(1, 30))
            np.testing.assert_allclose(
                wasserstein_1d(a, b), stats.wasserstein_distance(a, b), atol=1e-9
            )

    def test_equal_sizes_reduce_to_sorted_mean(self):
        """For equal counts the distance is the mean |sorted - sorted| gap."""
        rng = np.random.default_rng(42)
        for _ in range(20):
            a, b = rng.normal(size=(2, 25))
            expected = np.mean(np.abs(np.sort(a) - np.sort(b)))
            np.testing.assert_allclose(wasserstein_1d(a, b), expected, atol=1e-12)

    def test_symmetric_nonnegative_zero_on_match(self):
        rng = np.random.default_rng(42)
        a, b = rng.normal(size=(2, 15))
        assert wasserstein_1d(a, b) == pytest.approx(wasserstein_1d(b, a), abs=1e-15)
        assert wasserstein_1d(a, b) > 0
        assert wasserstein_1d(a, np.copy(a)) == 0.0
        assert wasserstein_1d(a, np.random.default_rng(1).permutation(a)) == 0.0

    def test_rejects_empty(self):
        with pytest.raises(ParameterError):
            wasserstein_1d(np.array([]), np.array([1.0]))


class TestSelectThreshold:
    def test_candidate_set(self):
        """Candidates are midpoints of distinct scores plus finite guards."""
        np.testing.assert_array_equal(
            threshold_candidates(np.array([1.0, 2.0, 5.0, 6.0, 2.0])),
            [0.0, 1.5, 3.5, 5.5, 7.0],
        )

    def test_worked_example(self):
        """Matching {5,6} against scores {1,2,5,6} cuts at 3.5 exactly."""
        eta = select_threshold(
            "positive", np.array([5.0, 6.0]), np.array([1.0, 2.0, 5.0, 6.0])
        )
        assert eta == 3.5

    def _dense_scan(self, side, labeled, sims, n=1000):
        """Independent route: scan a dense grid of thresholds directly."""
        grid = np.linspace(sims.min() - 2, sims.max() + 2, n)
        best_w = np.inf
        best_eta = None
        for eta in grid:
            subset = sims[sims > eta] if side == "positive" else sims[sims < eta]
            if subset.size == 0:
                continue
            w = wasserstein_1d(labeled, subset)
            if w < best_w - 1e-12:
                best_w, best_eta = w, eta
        return best_eta, best_w

    @pytest.mark.parametrize("side", ["positive", "negative"])
    def test_never_beaten_by_dense_scan(self, side):
        """No grid threshold conditions a strictly better subset."""
        rng = np.random.default_rng(42)
        for _ in range(25):
            labeled = rng.normal(2 if side == "positive" else -2, 1, size=8)
            sims = rng.normal(0, 2, size=12)
            eta = select_threshold(side, labeled, sims)
            subset = sims[sims > eta] if side == "positive" else sims[sims < eta]
            chosen_w = wasserstein_1d(labeled, subset)
            _, scan_w = self._dense_scan(side, labeled, sims)
            assert chosen_w <= scan_w + 1e-12

    def test_positive_tie_takes_smallest(self):
        """Equidistant candidates resolve downward on the anomalous side."""
        eta = select_threshold("positive", np.array([1.0]), np.array([0.0, 2.0]))
        assert eta == -1.0  # {0,2} and {2} are both at distance 1; keep smallest

    def test_negative_tie_takes_largest(self):
        """Equidistant candidates resolve upward on the normal side."""
        eta = select_threshold("negative", np.array([1.0]), np.array([0.0, 2.0]))
        assert eta == 3.0  # {0} and {0,2} are both at distance 1; keep largest

    def test_guards_keep_full_set_reachable(self):
        """The outer guard candidates condition on the entire score set."""
        sims = np.array([4.0, 4.0, 4.0])
        assert select_threshold("positive", np.array([4.0]), sims) == 3.0
        assert select_threshold("negative", np.array([4.0]), sims) == 5.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ParameterError):
            select_threshold("sideways", np.array([1.0]), np.array([1.0]))
        with pytest.raises(ParameterError):
            select_threshold("positive", np.array([]), np.array([1.0]))
        with pytest.raises(ParameterError):
            select_threshold("positive", np.array([1.0]), np.array([]))


def assign_reference(scores, upper, lower, negative_against_upper=False):
    """Literal restatement of the unanimity rule."""
    ref = upper if negative_against_upper else lower
    pos = all(s > u for s, u in zip(scores, upper))
    neg = all(s < r for s, r in zip(scores, ref))
    if pos and not neg:
        return LABEL_ANOMALOUS
    if neg and not pos:
        return LABEL_NORMAL
    return LABEL_UNKNOWN


class TestAssignLabel:
    def test_exhaustive_two_member_grid(self):
        """All 3^6 score/threshold combinations match the literal rule."""
        vals = [0.0, 1.0, 2.0]
        for flag in (False, True):
            for s1 in vals:
                for s2 in vals:
                    for u1 in vals:
                        for u2 in vals:
                            for l1 in vals:
                                for l2 in vals:
                                    got = assign_label(
                                        np.array([s1, s2]),
                                        np.array([u1, u2]),
                                        np.array([l1, l2]),
                                        negative_against_upper=flag,
                                    )
                                    want = assign_reference(
                                        [s1, s2], [u1, u2], [l1, l2], flag
                                    )
                                    assert got == want

    def test_monotone_in_scores(self):
        """Raising scores never moves a label backwards (0 -> -1 -> 1)."""
        order = {LABEL_NORMAL: 0, LABEL_UNKNOWN: 1, LABEL_ANOMALOUS: 2}
        rng = np.random.default_rng(42)
        for _ in range(10_000):
            k = int(rng.integers(1, 4))
            upper = rng.normal(size=k)
            lower = rng.normal(size=k)
            scores = rng.normal(size=k)
            bumped = scores + rng.uniform(0, 2, size=k)
            before = assign_label(scores, upper, lower)
            after = assign_label(bumped, upper, lower)
            assert order[after] >= order[before]

    def test_both_sides_simultaneously_is_unknown(self):
        """Scores between a high lower and low upper satisfy neither side alone."""
        got = assign_label(np.array([0.5]), np.array([0.0]), np.array([1.0]))
        assert got == LABEL_UNKNOWN  # above upper AND below lower

    def test_length_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            assign_label(np.array([1.0]), np.array([1.0, 2.0]), np.array([0.0]))


class TestSubsetsAndProjection:
    def test_split_partitions_rows(self):
        """Subsets are disjoint, near-equal, and jointly cover every row."""
        rng = np.random.default_rng(42)
        x = np.arange(23, dtype=float).reshape(-1, 1)
        parts = split_subsets(x, 3, rng)
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1
        merged = np.sort(np.concatenate(parts).ravel())
        np.testing.assert_array_equal(merged, x.ravel())

    def test_projection_identity_when_small(self):
        """No projection is applied when the input is already narrow."""
        p = random_projection(3, 8, np.random.default_rng(42))
        np.testing.assert_array_equal(p, np.eye(3))

    def test_projection_columns_orthonormal(self):
        p = random_projection(32, 8, np.random.default_rng(42))
        assert p.shape == (32, 8)
        np.testing.assert_allclose(p.T @ p, np.eye(8), atol=1e-10)


class TestBuildLabeler:
    def _data(self, seed=42):
        rng = np.random.default_rng(seed)
        normal = rng.normal(0, 1, size=(30, 6))
        anomalous = rng.normal(6, 1, size=(10, 6))
        sims = np.concatenate(
            [rng.normal(0, 1, size=(20, 6)), rng.normal(6, 1, size=(20, 6))]
        )
        return anomalous, normal, sims

    def test_committee_shape_and_thresholds(self):
        anomalous, normal, sims = self._data()
        labeler = build_labeler(
            anomalous, normal, sims, 2, np.random.default_rng(0), np.eye(6), components=2
        )
        assert labeler.k == 2
        assert len(labeler.scorers) == 2
        assert np.isfinite(labeler.upper).all() and np.isfinite(labeler.lower).all()

    def test_separated_data_labels_correctly(self):
        """Normal-only scorers send clear outliers up and inliers down."""
        anomalous, normal, sims = self._data()
        labeler = build_labeler(
            anomalous,
            normal,
            sims,
            2,
            np.random.default_rng(0),
            np.eye(6),
            components=2,
            fit_includes_sim=False,
        )
        fresh_normal = np.random.default_rng(9).normal(0, 0.2, size=(5, 6))
        fresh_anom = np.random.default_rng(10).normal(6, 0.5, size=(5, 6))
        assert (labeler.label_many(fresh_normal) == LABEL_NORMAL).all()
        assert (labeler.label_many(fresh_anom) == LABEL_ANOMALOUS).all()
        # borderline draws may abstain but must never cross to the other side
        borderline = np.random.default_rng(11).normal(0, 1.0, size=(50, 6))
        assert LABEL_ANOMALOUS not in labeler.label_many(borderline)

    def test_label_many_matches_single(self):
        anomalous, normal, sims = self._data()
        labeler = build_labeler(
            anomalous, normal, sims, 2, np.random.default_rng(0), np.eye(6), components=2
        )
        batch = np.random.default_rng(11).normal(3, 3, size=(20, 6))
        singles = [labeler.label(row) for row in batch]
        np.testing.assert_array_equal(labeler.label_many(batch), singles)

    def test_deterministic(self):
        anomalous, normal, sims = self._data()
        a = build_labeler(anomalous, normal, sims, 2, np.random.default_rng(3), np.eye(6))
        b = build_labeler(anomalous, normal, sims, 2, np.random.default_rng(3), np.eye(6))
        np.testing.assert_array_equal(a.upper, b.upper)
        np.testing.assert_array_equal(a.lower, b.lower)

    def test_rejects_invalid_thresholds(self):
        scorer = MixtureScorer(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        with pytest.raises(ParameterError):
            PseudoLabeler(
                scorers=[scorer],
                upper=np.array([np.nan]),
                lower=np.array([0.0]),
                projector=np.eye(1),
            )
