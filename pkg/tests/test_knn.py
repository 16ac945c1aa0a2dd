"""Brute-force nearest-class search: exactness, tie rule, threading, targets."""

import numpy as np
import pytest

from esseg.embeddings import EmbeddingTable
from esseg.knn import NeighborIndex, TargetRows, knn_search, knn_with_target

TABLE = np.array([
    [1.0, 0.0],
    [0.0, 1.0],
    [-1.0, 0.0],
    [0.0, -1.0],
    [0.8, 0.6],
])
QUERIES = np.array([
    [0.9, 0.1],
    [-0.5, -0.5],
    [0.0, 1.0],
])
# full orderings under squared distance with ties broken toward the
# lower class index; query 1 ties twice (classes 2/3 at 0.5, 0/1 at 2.5)
FULL_ORDER = np.array([
    [0, 4, 1, 3, 2],
    [2, 3, 0, 1, 4],
    [1, 4, 0, 2, 3],
])


def _sorted_oracle(rows, queries, k):
    """Independent reference: per-query lexicographic full sort."""
    out = np.empty((len(queries), k), dtype=np.int64)
    for i, q in enumerate(queries):
        d = np.sum((rows - q) ** 2, axis=1)
        out[i] = np.lexsort((np.arange(len(rows)), d))[:k]
    return out


class TestKnnSearch:
    def test_frozen_orderings(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        for k in (1, 3, 5):
            result = knn_search(table, QUERIES, k)
            assert isinstance(result, NeighborIndex)
            assert result.k == k
            np.testing.assert_array_equal(result.indices, FULL_ORDER[:, :k])

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            c = int(rng.integers(3, 40))
            d = int(rng.integers(1, 8))
            n = int(rng.integers(1, 50))
            rows = rng.standard_normal((c, d))
            queries = rng.standard_normal((n, d))
            k = int(rng.integers(1, c + 1))
            got = knn_search(EmbeddingTable(rows=rows, normalized=False),
                             queries, k)
            np.testing.assert_array_equal(got.indices,
                                          _sorted_oracle(rows, queries, k))

    def test_quantized_ties_match_oracle(self):
        """Coordinates on a coarse grid force many exactly-equal distances."""
        rng = np.random.default_rng(21)
        rows = rng.integers(-2, 3, size=(30, 3)).astype(np.float64)
        queries = rng.integers(-2, 3, size=(40, 3)).astype(np.float64)
        got = knn_search(EmbeddingTable(rows=rows, normalized=False), queries, 7)
        np.testing.assert_array_equal(got.indices, _sorted_oracle(rows, queries, 7))

    def test_thread_count_does_not_change_results(self):
        rng = np.random.default_rng(22)
        rows = rng.standard_normal((64, 6))
        queries = rng.standard_normal((5000, 6))
        table = EmbeddingTable(rows=rows, normalized=False)
        base = knn_search(table, queries, 9, n_threads=1)
        for n_threads in (2, 3, 8):
            other = knn_search(table, queries, 9, n_threads=n_threads)
            np.testing.assert_array_equal(base.indices, other.indices)

    def test_k_out_of_range(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        with pytest.raises(ValueError):
            knn_search(table, QUERIES, 0)
        with pytest.raises(ValueError):
            knn_search(table, QUERIES, 6)


class TestKnnWithTarget:
    def test_target_leads_and_duplicate_dropped(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        labels = np.array([0, 4, 2])
        result = knn_with_target(table, QUERIES, labels, k=2)
        assert isinstance(result, TargetRows)
        # query 0: target 0 is also its nearest neighbour -> length k
        assert result.lengths[0] == 2
        np.testing.assert_array_equal(result.indices[0, :2], [0, 4])
        # query 1: target 4 is far -> length k+1, neighbours keep distance order
        assert result.lengths[1] == 3
        np.testing.assert_array_equal(result.indices[1, :3], [4, 2, 3])
        # query 2: target 2 not among the 2 nearest
        assert result.lengths[2] == 3
        np.testing.assert_array_equal(result.indices[2, :3], [2, 1, 4])

    def test_padding_is_minus_one(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        labels = np.array([0, 4, 2])
        result = knn_with_target(table, QUERIES, labels, k=2)
        assert result.indices[0, 2] == -1

    def test_ignored_pixels_get_empty_rows(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        labels = np.array([-1, 1, -1])
        result = knn_with_target(table, QUERIES, labels, k=3)
        assert result.lengths[0] == 0
        assert result.lengths[2] == 0
        assert result.lengths[1] > 0

    def test_no_dedup_always_prepends(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        labels = np.array([0, 4, 2])
        result = knn_with_target(table, QUERIES, labels, k=2, dedup=False)
        np.testing.assert_array_equal(result.lengths, [3, 3, 3])
        # target may now appear twice
        np.testing.assert_array_equal(result.indices[0, :3], [0, 0, 4])

    def test_union_semantics_randomized(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            c = int(rng.integers(4, 20))
            rows = rng.standard_normal((c, 4))
            queries = rng.standard_normal((12, 4))
            labels = rng.integers(0, c, size=12)
            k = int(rng.integers(1, c))
            table = EmbeddingTable(rows=rows, normalized=False)
            res = knn_with_target(table, queries, labels, k=k)
            plain = knn_search(table, queries, k)
            for i in range(12):
                n = int(res.lengths[i])
                ids = list(res.indices[i, :n])
                assert ids[0] == labels[i]
                assert len(set(ids)) == n
                assert set(ids) == set(plain.indices[i]) | {labels[i]}

    def test_label_out_of_range(self):
        table = EmbeddingTable(rows=TABLE, normalized=False)
        with pytest.raises(ValueError):
            knn_with_target(table, QUERIES, np.array([0, 5, 1]), k=2)
