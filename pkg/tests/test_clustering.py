import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgaugment.clustering import (
    ClusterConfig,
    balanced_kmeans,
    balanced_sizes,
    build_cluster_matrices,
    cluster_or_fallback,
    clustering_objective,
    read_clusters,
    shuffle_members,
    write_clusters,
)
from kgaugment.errors import DomainError, ParseError
from kgaugment.kg_embed import EmbeddingTable


def brute_force_objective(points: np.ndarray, clusters: int) -> float:
    target = sorted(balanced_sizes(len(points), clusters))
    best = np.inf
    for labels in itertools.product(range(clusters), repeat=len(points)):
        labels = np.array(labels)
        if sorted(np.bincount(labels, minlength=clusters).tolist()) != target:
            continue
        best = min(best, clustering_objective(points, labels))
    return best


def test_four_point_example():
    points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    result = balanced_kmeans(points, ClusterConfig(clusters=2, seed=0))
    assert result.assignments[0] == result.assignments[1]
    assert result.assignments[2] == result.assignments[3]
    assert result.assignments[0] != result.assignments[2]
    assert result.objective == pytest.approx(1.0)


def test_single_cluster_holds_everything():
    points = np.random.default_rng(0).normal(size=(7, 3))
    result = balanced_kmeans(points, ClusterConfig(clusters=1))
    assert result.sizes == [7]
    assert result.members == (tuple(range(7)),)


def test_one_point_per_cluster():
    points = np.random.default_rng(1).normal(size=(6, 2))
    result = balanced_kmeans(points, ClusterConfig(clusters=6))
    assert result.sizes == [1] * 6
    assert result.objective == 0.0
    assert sorted(i for ids in result.members for i in ids) == list(range(6))


def test_too_many_clusters():
    with pytest.raises(DomainError):
        balanced_kmeans(np.zeros((3, 2)), ClusterConfig(clusters=4))
    with pytest.raises(DomainError):
        ClusterConfig(clusters=0)


@settings(deadline=None, max_examples=25)
@given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 10_000))
def test_close_to_best_balanced_partition(count, clusters, seed):
    if clusters > count:
        clusters = count
    points = np.random.default_rng(seed).normal(size=(count, 2))
    result = balanced_kmeans(points, ClusterConfig(clusters=clusters, seed=seed))
    assert result.objective <= 1.5 * brute_force_objective(points, clusters) + 1e-9


@pytest.mark.parametrize("count,clusters", [(23, 5), (20, 20), (41, 6), (9, 2)])
def test_sizes_are_balanced_and_partition_ids(count, clusters):
    points = np.random.default_rng(count).normal(size=(count, 4))
    result = balanced_kmeans(points, ClusterConfig(clusters=clusters, restarts=2))
    assert max(result.sizes) - min(result.sizes) <= 1
    assert sorted(result.sizes, reverse=True) == balanced_sizes(count, clusters)
    ids = [i for members in result.members for i in members]
    assert sorted(ids) == list(range(count))
    assert result.rows == -(-count // clusters)


def test_reclustering_is_reproducible():
    points = np.random.default_rng(5).normal(size=(30, 3))
    config = ClusterConfig(clusters=4, seed=9)
    first, second = balanced_kmeans(points, config), balanced_kmeans(points, config)
    np.testing.assert_array_equal(first.assignments, second.assignments)
    np.testing.assert_array_equal(first.matrices, second.matrices)
    assert first.objective == second.objective


def test_cluster_matrices_stack_and_pad():
    vectors = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
    matrices, mask = build_cluster_matrices(np.array([0, 0, 1]), vectors)
    assert matrices.shape == (2, 2, 3)
    np.testing.assert_array_equal(matrices[0], vectors[:2])
    np.testing.assert_array_equal(matrices[1, 0], vectors[2])
    np.testing.assert_array_equal(matrices[1, 1], 0.0)
    np.testing.assert_array_equal(mask, [[True, True], [True, False]])


def test_shuffled_members_keep_rows():
    points = np.random.default_rng(2).normal(size=(12, 3))
    clusters = balanced_kmeans(points, ClusterConfig(clusters=3))
    shuffled = shuffle_members(clusters, points, np.random.default_rng(4))
    np.testing.assert_array_equal(shuffled.assignments, clusters.assignments)
    for c in range(3):
        before = sorted(map(tuple, clusters.matrices[c][clusters.mask[c]]))
        after = sorted(map(tuple, shuffled.matrices[c][shuffled.mask[c]]))
        assert before == after


def test_fallback_when_table_is_small(caplog):
    table = EmbeddingTable(np.eye(4), kind="relation")
    assert cluster_or_fallback(table, ClusterConfig(clusters=20)) is None
    assert "full table" in caplog.text
    assert cluster_or_fallback(table, ClusterConfig(clusters=2)).kind == "relation"


def test_cluster_dump_keeps_stacking_order(tmp_path):
    points = np.random.default_rng(3).normal(size=(10, 2))
    clusters = shuffle_members(balanced_kmeans(points, ClusterConfig(clusters=3)), points, np.random.default_rng(0))
    path = tmp_path / "clusters.tsv"
    write_clusters(path, clusters)
    loaded = read_clusters(path, points)
    assert loaded.members == clusters.members
    np.testing.assert_array_equal(loaded.matrices, clusters.matrices)
    assert loaded.objective == pytest.approx(clusters.objective)


def test_cluster_dump_errors(tmp_path):
    points = np.zeros((3, 2))
    path = tmp_path / "clusters.tsv"
    path.write_text("0\t0\n0\t1\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_clusters(path, points)
    assert info.value.line_number == 2

    path.write_text("0\t0\n1\t0\n", encoding="utf-8")
    with pytest.raises(DomainError):
        read_clusters(path, points)
