import numpy as np
import pytest

from pne.errors import ShapeError, StatisticsError
from pne.geometry import (
    NeighborList,
    PointCloud,
    ball_query,
    build_grid_index,
    cell_average_subsample,
    farthest_distance_stats,
    knn,
)


def brute_knn(query, support, k):
    """O(N^2) oracle with the documented tie rule (smallest index wins)."""
    out = []
    for q in query.positions:
        d = np.linalg.norm(support.positions - q, axis=1)
        order = np.lexsort((np.arange(len(d)), d))
        out.append(np.sort(order[: min(k, len(d))]))
    return out


def brute_ball(query, support, radius):
    out = []
    for q in query.positions:
        d = np.linalg.norm(support.positions - q, axis=1)
        out.append(np.flatnonzero(d <= radius))
    return out


def as_lists(nl):
    return [nl.neighbors(i).tolist() for i in range(nl.num_queries)]


def test_pointcloud_validation():
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.inf, 0, 0]]))
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((2, 3)), labels=np.array([0]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), labels=np.array([-1]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), cell_size=0.0)


def test_neighborlist_validation():
    with pytest.raises(ShapeError):
        NeighborList(np.array([1, 2]), np.array([0, 1]))
    with pytest.raises(ShapeError):
        NeighborList(np.array([0, 2, 1]), np.array([0, 1]))
    with pytest.raises(ShapeError):
        NeighborList(np.array([0, 3]), np.array([0, 1]))


def test_grid_index_single_point():
    grid = build_grid_index(PointCloud(np.array([[0.2, 0.2, 0.2]])), 1.0)
    assert list(grid.cells) == [(0, 0, 0)]
    assert grid.cells[(0, 0, 0)].tolist() == [0]


def test_grid_index_cell_split():
    grid = build_grid_index(PointCloud(np.array([[0.9, 0, 0], [1.1, 0, 0]])), 1.0)
    assert set(grid.cells) == {(0, 0, 0), (1, 0, 0)}


def test_grid_index_errors():
    with pytest.raises(ValueError):
        build_grid_index(PointCloud(np.zeros((1, 3))), 0.0)
    with pytest.raises(ValueError):
        build_grid_index(PointCloud(np.zeros((0, 3))), 1.0)


def test_subsample_centroid():
    cloud = PointCloud(np.array([[0.2, 0.2, 0.0], [0.4, 0.6, 0.0]]))
    out, parents = cell_average_subsample(cloud, 1.0)
    assert len(out) == 1
    assert np.allclose(out.positions[0], [0.3, 0.4, 0.0])
    assert parents[0].tolist() == [0, 1]
    assert out.cell_size == 1.0


def test_subsample_majority_label_tie():
    cloud = PointCloud(np.zeros((3, 3)) + 0.1, labels=np.array([0, 0, 1]))
    out, _ = cell_average_subsample(cloud, 1.0)
    assert out.labels[0] == 0
    # tie between 1 and 2 -> smallest class id
    cloud = PointCloud(np.zeros((2, 3)) + 0.1, labels=np.array([2, 1]))
    out, _ = cell_average_subsample(cloud, 1.0)
    assert out.labels[0] == 1


def test_subsample_counts_match_bruteforce_cells():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(-2, 2, size=(300, 3)))
    for cell in (0.3, 0.7, 1.5):
        out, parents = cell_average_subsample(cloud, cell)
        brute = {tuple(c) for c in np.floor(cloud.positions / cell).astype(int)}
        assert len(out) == len(brute)
        # parent map partitions the input
        joined = np.sort(np.concatenate(parents))
        assert np.array_equal(joined, np.arange(len(cloud)))


def test_subsample_feature_average():
    cloud = PointCloud(np.zeros((2, 3)) + 0.2, features=np.array([[1.0, 2.0], [3.0, 4.0]]))
    out, _ = cell_average_subsample(cloud, 1.0)
    assert np.allclose(out.features[0], [2.0, 3.0])


def test_knn_simple():
    support = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = knn(query, support, 2)
    assert nl.neighbors(0).tolist() == [0, 1]


def test_knn_self_neighbor():
    cloud = PointCloud(np.array([[0.0, 0, 0], [5.0, 0, 0]]))
    nl = knn(cloud, cloud, 1)
    assert nl.neighbors(0).tolist() == [0]
    assert nl.neighbors(1).tolist() == [1]


def test_knn_ragged_when_support_small():
    support = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = knn(query, support, 5)
    assert nl.neighbors(0).tolist() == [0, 1]


def test_knn_tie_break_smallest_index():
    support = PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 1.0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = knn(query, support, 2, grid_cell=0.5)
    # all three at distance 1; ties break toward smallest support index
    assert nl.neighbors(0).tolist() == [0, 1]


def test_knn_errors():
    cloud = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        knn(cloud, cloud, 0)
    with pytest.raises(ValueError):
        knn(cloud, PointCloud(np.zeros((0, 3))), 1)


def test_ball_query_simple():
    support = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = ball_query(query, support, 1.5)
    assert nl.neighbors(0).tolist() == [0, 1]


def test_ball_query_inclusive_boundary():
    support = PointCloud(np.array([[1.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    assert ball_query(query, support, 1.0).neighbors(0).tolist() == [0]


def test_ball_query_empty_range():
    support = PointCloud(np.array([[10.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = ball_query(query, support, 0.5)
    assert nl.counts.tolist() == [0]


def test_ball_query_max_neighbors():
    support = PointCloud(np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = ball_query(query, support, 1.0, max_neighbors=2)
    assert nl.neighbors(0).tolist() == [0, 1]


@pytest.mark.parametrize("cross", [False, True])
def test_knn_matches_bruteforce(cross):
    rng = np.random.default_rng(3)
    for trial in range(20):
        n = int(rng.integers(5, 200))
        support = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
        query = PointCloud(rng.uniform(-1, 1, size=(int(rng.integers(1, 50)), 3))) if cross else support
        k = int(rng.integers(1, 12))
        nl = knn(query, support, k, grid_cell=float(rng.uniform(0.05, 0.8)))
        expected = brute_knn(query, support, k)
        assert as_lists(nl) == [e.tolist() for e in expected]


@pytest.mark.parametrize("cross", [False, True])
def test_ball_query_matches_bruteforce(cross):
    rng = np.random.default_rng(4)
    for trial in range(20):
        n = int(rng.integers(5, 200))
        support = PointCloud(rng.uniform(-1, 1, size=(n, 3)))
        query = PointCloud(rng.uniform(-1.5, 1.5, size=(int(rng.integers(1, 50)), 3))) if cross else support
        r = float(rng.uniform(0.1, 1.0))
        nl = ball_query(query, support, r)
        expected = brute_ball(query, support, r)
        assert as_lists(nl) == [e.tolist() for e in expected]


def test_knn_far_outside_grid():
    support = PointCloud(np.array([[0.0, 0, 0], [0.1, 0, 0.1], [0.2, 0.1, 0]]))
    query = PointCloud(np.array([[25.0, 25.0, 25.0]]))
    nl = knn(query, support, 2, grid_cell=0.1)
    assert as_lists(nl) == [e.tolist() for e in brute_knn(query, support, 2)]


def test_farthest_distance_stats():
    support = PointCloud(np.array([[1.0, 0, 0], [3.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0], [0.0, 0, 0]]))
    nl = NeighborList(np.array([0, 1, 2]), np.array([0, 1]))
    mean, var = farthest_distance_stats(nl, query, support, 1.0)
    assert mean == pytest.approx(2.0)
    assert var == pytest.approx(1.0)


def test_farthest_distance_stats_all_empty():
    support = PointCloud(np.array([[1.0, 0, 0]]))
    query = PointCloud(np.array([[0.0, 0, 0]]))
    nl = NeighborList(np.array([0, 0]), np.empty(0, dtype=np.int64))
    with pytest.raises(StatisticsError):
        farthest_distance_stats(nl, query, support, 1.0)
