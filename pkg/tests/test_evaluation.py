"""Ranking AUROC, its oracles, dataset evaluation, and result tables."""

import csv

import numpy as np
import pytest
from scipy.stats import rankdata

from madseg import dataio
from madseg.errors import ParameterError, UndefinedMetricError
from madseg.evaluation import (
    EvalResult,
    auroc,
    evaluate,
    results_table,
    table_average,
    write_records_csv,
    write_results_csv,
)


def auroc_pairwise_oracle(scores, labels):
    """O(n^2) count of correctly ordered (normal, anomalous) pairs."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_worked_example(self):
        """Three of four cross pairs ordered correctly gives 0.75."""
        got = auroc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))
        assert got == 0.75

    def test_perfect_and_inverted_separation(self):
        labels = np.array([0, 0, 1, 1])
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
        assert auroc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0

    def test_constant_scores_are_chance(self):
        assert auroc(np.ones(6), np.array([0, 1, 0, 1, 0, 1])) == 0.5

    def test_matches_pairwise_oracle(self):
        """Rank formula equals the quadratic oracle on 200 tied instances."""
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(4, 100))
            labels = np.zeros(n, dtype=int)
            labels[: int(rng.integers(1, n))] = 1
            rng.shuffle(labels)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.integers(0, 8, size=n).astype(float)  # heavy ties
            np.testing.assert_allclose(
                auroc(scores, labels), auroc_pairwise_oracle(scores, labels), atol=1e-12
            )

    def test_complement_identity(self):
        """Negated scores flip the metric to its complement."""
        rng = np.random.default_rng(42)
        scores = rng.normal(size=50)
        labels = (rng.uniform(size=50) > 0.5).astype(int)
        labels[:2] = [0, 1]
        np.testing.assert_allclose(
            auroc(-scores, labels), 1.0 - auroc(scores, labels), atol=1e-12
        )

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(42)
        scores = rng.normal(size=40)
        labels = (rng.uniform(size=40) > 0.5).astype(int)
        labels[:2] = [0, 1]
        assert auroc(scores, labels) == auroc(np.exp(scores) * 3 + 1, labels)

    def test_single_class_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc(np.array([0.1, 0.2]), np.array([1, 1]))
        with pytest.raises(UndefinedMetricError):
            auroc(np.array([0.1, 0.2]), np.array([0, 0]))

    def test_rejects_bad_inputs(self):
        with pytest.raises(ParameterError):
            auroc(np.array([np.nan, 0.2]), np.array([0, 1]))
        with pytest.raises(ParameterError):
            auroc(np.array([0.1, 0.2]), np.array([0, 2]))
        with pytest.raises(ParameterError):
            auroc(np.array([0.1]), np.array([0, 1]))

    def test_tie_ranks_match_library(self):
        """Midranks agree with the reference implementation."""
        from madseg.evaluation import _average_ranks

        rng = np.random.default_rng(42)
        values = rng.integers(0, 5, size=30).astype(float)
        np.testing.assert_allclose(_average_ranks(values), rankdata(values))


class TestEvaluate:
    def test_tiny_dataset_end_to_end(self, smoke_result, dataset_index, tmp_path):
        """Scores every test item, writes heatmaps, computes both metrics."""
        result = evaluate(
            smoke_result.model,
            smoke_result.bank,
            dataset_index,
            32,
            heatmap_dir=tmp_path / "maps",
            pixel_metrics=True,
        )
        assert result.n_normal == 4 and result.n_anomalous == 4
        assert len(result.records) == 8
        assert 0.0 <= result.auroc <= 1.0
        assert result.pixel_auroc is not None
        assert 0.0 <= result.pixel_auroc <= 1.0
        maps = sorted((tmp_path / "maps").glob("*.png"))
        assert len(maps) == 8
        hm = dataio.load_heatmap(maps[0])
        assert hm.shape == (32, 32)
        assert hm.min() >= 0.0 and hm.max() <= 1.0

    def test_scores_are_deterministic(self, smoke_result, dataset_index):
        a = evaluate(smoke_result.model, smoke_result.bank, dataset_index, 32)
        b = evaluate(smoke_result.model, smoke_result.bank, dataset_index, 32)
        assert [r.score for r in a.records] == [r.score for r in b.records]

    def test_records_csv_round_trip(self, smoke_result, dataset_index, tmp_path):
        result = evaluate(smoke_result.model, smoke_result.bank, dataset_index, 32)
        path = tmp_path / "scores.csv"
        write_records_csv(result, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        for row, rec in zip(rows, result.records):
            assert row["path"] == str(rec.path)
            assert int(row["label"]) == rec.label
            assert float(row["score"]) == rec.score


class TestResultsTable:
    def test_average_is_unweighted_mean(self):
        """The summary row averages categories, not individual images."""
        values = [81.07, 87.17, 98.78, 76.6]
        np.testing.assert_allclose(table_average(values), 85.905, atol=1e-12)

    def test_table_layout(self):
        text = results_table([("a", 0.5), ("b", 0.75)])
        lines = text.strip().splitlines()
        assert "a" in lines[0] or any("a" in ln for ln in lines)
        assert any("average" in ln for ln in lines)
        assert any("0.6250" in ln for ln in lines)

    def test_results_csv(self, tmp_path):
        path = tmp_path / "results.csv"
        write_results_csv([("a", 0.5), ("b", 0.75)], path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["category", "auroc"]
        assert rows[-1][0] == "average"
        assert float(rows[-1][1]) == 0.625
