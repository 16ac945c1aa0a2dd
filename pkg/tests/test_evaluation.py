"""Prediction, confusion-matrix metrics, memory model, table diagnostics."""

import numpy as np
import pytest

from esseg.embeddings import EmbeddingTable, init_table
from esseg.errors import NumericalError
from esseg.evaluation import (
    ConfusionMatrix,
    MemoryEstimate,
    agglomerative_cluster,
    compute_metrics,
    memory_estimate,
    norm_frequency_correlation,
    predict_labels,
)


class TestPredictLabels:
    def test_nearest_row_wins(self):
        table = EmbeddingTable(rows=np.eye(3))
        pixels = np.array([[0.9, 0.1, 0.0], [0.0, 0.2, 0.9]])
        np.testing.assert_array_equal(predict_labels(pixels, table), [0, 2])

    def test_tie_goes_to_lowest_index(self):
        table = EmbeddingTable(rows=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                               normalized=True)
        pred = predict_labels(np.array([[0.0, 1.0]]), table)
        assert pred[0] == 0

    def test_chunking_invariant(self):
        rng = np.random.default_rng(60)
        table = init_table(15, 6, seed=0)
        pixels = rng.standard_normal((1000, 6))
        a = predict_labels(pixels, table, chunk=13)
        b = predict_labels(pixels, table, chunk=8192)
        np.testing.assert_array_equal(a, b)


class TestConfusionMatrix:
    def test_update_counts(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 0, 1, 2]), np.array([0, 1, 1, 0]))
        want = np.array([[1, 1, 0], [0, 1, 0], [1, 0, 0]])
        np.testing.assert_array_equal(cm.counts, want)
        assert cm.total == 4

    def test_ignored_ground_truth_excluded(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, -1, 1]), np.array([0, 1, 1]))
        assert cm.total == 2
        np.testing.assert_array_equal(cm.counts, [[1, 0], [0, 1]])

    def test_sharded_accumulation_equals_monolithic(self):
        rng = np.random.default_rng(61)
        gt = rng.integers(-1, 5, size=2000)
        pred = rng.integers(0, 5, size=2000)
        mono = ConfusionMatrix(5)
        mono.update(gt, pred)
        shards = []
        for lo in range(0, 2000, 333):
            cm = ConfusionMatrix(5)
            cm.update(gt[lo:lo + 333], pred[lo:lo + 333])
            shards.append(cm)
        merged = shards[0]
        for cm in shards[1:]:
            merged = merged + cm
        np.testing.assert_array_equal(merged.counts, mono.counts)

    def test_prediction_out_of_range_rejected(self):
        cm = ConfusionMatrix(3)
        with pytest.raises(ValueError):
            cm.update(np.array([0]), np.array([3]))


class TestComputeMetrics:
    def test_two_class_uniform_confusion(self):
        cm = ConfusionMatrix(2, counts=np.array([[1, 1], [1, 1]]))
        m = compute_metrics(cm)
        assert m["pacc"] == 0.5
        assert abs(m["miou"] - 1.0 / 3.0) < 1e-15
        assert abs(m["fwiou"] - 1.0 / 3.0) < 1e-15
        np.testing.assert_allclose(m["per_class"], [1.0 / 3.0, 1.0 / 3.0],
                                   atol=1e-15)

    def test_perfect_prediction(self):
        cm = ConfusionMatrix(3, counts=np.diag([5, 2, 9]))
        m = compute_metrics(cm)
        assert m["pacc"] == 1.0
        assert m["miou"] == 1.0
        assert m["fwiou"] == 1.0

    def test_absent_class_excluded_from_mean(self):
        """A class with no ground truth and no predictions has undefined IoU
        and must not drag the mean down."""
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[0, 0] = 4
        counts[1, 1] = 4
        m = compute_metrics(ConfusionMatrix(3, counts=counts))
        assert m["per_class"][2] is None
        assert m["miou"] == 1.0

    def test_keys(self):
        m = compute_metrics(ConfusionMatrix(2, counts=np.eye(2, dtype=np.int64)))
        assert set(m) == {"miou", "pacc", "fwiou", "per_class"}

    def test_fwiou_never_exceeds_pixel_accuracy(self):
        rng = np.random.default_rng(62)
        for _ in range(100):
            c = int(rng.integers(2, 8))
            counts = rng.integers(0, 30, size=(c, c))
            if counts.sum() == 0:
                continue
            m = compute_metrics(ConfusionMatrix(c, counts=counts))
            assert m["fwiou"] <= m["pacc"] + 1e-12

    def test_matches_per_class_formula(self):
        rng = np.random.default_rng(63)
        counts = rng.integers(0, 40, size=(4, 4))
        m = compute_metrics(ConfusionMatrix(4, counts=counts))
        for i in range(4):
            tp = counts[i, i]
            union = counts[i, :].sum() + counts[:, i].sum() - tp
            if union == 0:
                assert m["per_class"][i] is None
            else:
                assert abs(m["per_class"][i] - tp / union) < 1e-12


class TestMemoryEstimate:
    def test_output_ratio_is_class_over_dim(self):
        est = memory_estimate(batch=1, height=512, width=512,
                              num_classes=1284, dim=12)
        assert est.output_ratio == 107.0
        assert est.baseline_output_bytes == 1 * 512 * 512 * 1284 * 4
        assert est.ours_output_bytes == 1 * 512 * 512 * 12 * 4
        assert est.table_bytes == 1284 * 12 * 4

    def test_ours_output_constant_in_class_count(self):
        sizes = [memory_estimate(2, 64, 64, c, 16).ours_output_bytes
                 for c in (10, 100, 1000, 100000)]
        assert len(set(sizes)) == 1

    def test_ratio_accounts_for_table(self):
        est = memory_estimate(1, 8, 8, num_classes=100, dim=4)
        want = est.baseline_output_bytes / (est.ours_output_bytes
                                            + est.table_bytes)
        assert abs(est.ratio - want) < 1e-12

    def test_to_dict_round_trip(self):
        est = memory_estimate(1, 4, 4, 10, 2)
        d = est.to_dict()
        assert d["output_ratio"] == 5.0
        assert isinstance(est, MemoryEstimate)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            memory_estimate(0, 4, 4, 10, 2)


class TestAgglomerativeCluster:
    def test_matches_scipy_average_linkage(self):
        scipy_hier = pytest.importorskip("scipy.cluster.hierarchy")
        rng = np.random.default_rng(64)
        for trial in range(10):
            c = int(rng.integers(3, 30))
            d = int(rng.integers(2, 6))
            rows = rng.standard_normal((c, d))
            table = EmbeddingTable(rows=rows, normalized=False)
            merges = agglomerative_cluster(table)
            z = scipy_hier.linkage(rows, method="average")
            assert len(merges) == c - 1
            for t, m in enumerate(merges):
                assert {m["a"], m["b"]} == {int(z[t, 0]), int(z[t, 1])}
                assert abs(m["height"] - z[t, 2]) < 1e-9
                assert m["size"] == int(z[t, 3])

    def test_heights_monotone(self):
        table = init_table(25, 8, seed=5)
        merges = agglomerative_cluster(table)
        heights = [m["height"] for m in merges]
        assert all(a <= b + 1e-12 for a, b in zip(heights, heights[1:]))

    def test_new_cluster_ids_follow_scipy_convention(self):
        table = init_table(4, 3, seed=0)
        merges = agglomerative_cluster(table)
        # merge t may refer to clusters created by earlier merges as C + t
        seen = set(range(4))
        for t, m in enumerate(merges):
            assert m["a"] in seen and m["b"] in seen
            seen.add(4 + t)


class TestNormFrequencyCorrelation:
    def test_matches_corrcoef(self):
        rng = np.random.default_rng(65)
        rows = rng.standard_normal((12, 5)) * rng.uniform(0.5, 2.0, (12, 1))
        freqs = rng.integers(1, 1000, size=12).astype(np.float64)
        table = EmbeddingTable(rows=rows, normalized=False)
        r = norm_frequency_correlation(table, freqs)
        want = np.corrcoef(np.linalg.norm(rows, axis=1), freqs)[0, 1]
        assert abs(r - want) < 1e-12

    def test_constant_norms_raise(self):
        table = init_table(6, 4, seed=1)  # all norms exactly 1
        with pytest.raises(NumericalError):
            norm_frequency_correlation(table, np.arange(6, dtype=np.float64))
