"""Point-cloud container, cell-average subsampling, grid-accelerated
neighborhood queries (kNN and ball query) and receptive-field statistics.

Conventions that tests rely on:
  * neighbor indices are stored sorted ascending within each query range;
  * kNN ties at the k-th distance break toward the smallest support index;
  * ball query includes the boundary (distance <= radius);
  * a query point contained in the support cloud is its own neighbor.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError, StatisticsError


@dataclass
class PointCloud:
    """Positions with optional per-point features and labels.

    `cell_size` records the subsampling cell that produced this cloud
    (None for raw input clouds).
    """

    positions: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    cell_size: Optional[float] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be (N, 3), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        n = len(self.positions)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ShapeError("features row count must match positions")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ShapeError("labels length must match positions")
            if n and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")
        if self.cell_size is not None and self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    def __len__(self):
        return len(self.positions)


@dataclass
class NeighborList:
    """Ragged query->support index structure.

    Neighbors of query i are indices[offsets[i]:offsets[i+1]], stored
    sorted ascending by support index.
    """

    offsets: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.offsets.ndim != 1 or self.offsets[0] != 0:
            raise ShapeError("offsets must be 1-d and start at 0")
        if np.any(np.diff(self.offsets) < 0):
            raise ShapeError("offsets must be non-decreasing")
        if self.offsets[-1] != len(self.indices):
            raise ShapeError("offsets end must equal indices length")

    @property
    def num_queries(self):
        return len(self.offsets) - 1

    @property
    def counts(self):
        return np.diff(self.offsets)

    def neighbors(self, i):
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def query_ids(self):
        """Flat query id per stored pair (parallel to `indices`)."""
        return np.repeat(np.arange(self.num_queries), self.counts)


@dataclass
class GridIndex:
    """Uniform hash grid: integer cell coordinate -> point index array."""

    cell_size: float
    cells: dict = field(default_factory=dict)
    cell_min: np.ndarray = None
    cell_max: np.ndarray = None


def _cell_coords(positions, cell_size):
    return np.floor(positions / cell_size).astype(np.int64)


def build_grid_index(cloud, cell_size):
    """Index all points of `cloud` into a uniform grid."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot index an empty cloud")
    coords = _cell_coords(cloud.positions, cell_size)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    sorted_coords = coords[order]
    uniq, starts = np.unique(sorted_coords, axis=0, return_index=True)
    cells = {}
    bounds = np.append(starts, len(order))
    for row, s, e in zip(uniq, bounds[:-1], bounds[1:]):
        cells[tuple(row)] = np.sort(order[s:e])
    return GridIndex(
        cell_size=float(cell_size),
        cells=cells,
        cell_min=uniq.min(axis=0),
        cell_max=uniq.max(axis=0),
    )


def cell_average_subsample(cloud, cell_size):
    """Replace the points of each non-empty cell by their centroid.

    Features are averaged, labels take the majority vote (ties -> smallest
    class id). Returns the subsampled cloud and a parent map: one input
    index array per output point, partitioning the input.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    coords = _cell_coords(cloud.positions, cell_size)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    sorted_coords = coords[order]
    uniq, starts = np.unique(sorted_coords, axis=0, return_index=True)
    bounds = np.append(starts, len(order))

    parent_map = []
    positions = np.empty((len(uniq), 3))
    features = None
    if cloud.features is not None:
        features = np.empty((len(uniq), cloud.features.shape[1]))
    labels = None
    if cloud.labels is not None:
        labels = np.empty(len(uniq), dtype=np.int64)

    for i, (s, e) in enumerate(zip(bounds[:-1], bounds[1:])):
        members = np.sort(order[s:e])
        parent_map.append(members)
        positions[i] = cloud.positions[members].mean(axis=0)
        if features is not None:
            features[i] = cloud.features[members].mean(axis=0)
        if labels is not None:
            labels[i] = np.bincount(cloud.labels[members]).argmax()

    out = PointCloud(positions, features=features, labels=labels, cell_size=float(cell_size))
    return out, parent_map


def _default_grid_cell(support):
    # Prefer the cloud's own subsampling cell; otherwise aim for a handful
    # of points per cell from the bounding box.
    if support.cell_size is not None:
        return support.cell_size
    span = support.positions.max(axis=0) - support.positions.min(axis=0)
    extent = max(float(span.max()), 1e-12)
    return extent / max(1.0, round(len(support) ** (1.0 / 3.0)))


def knn(query, support, k, grid_cell=None):
    """k nearest support points per query (ragged if support has < k points).

    Grid-accelerated expanding-ring search. After rings 0..L around the
    query cell are exhausted, any unseen point is at distance >= L * cell,
    so the search stops once the k-th candidate distance is within that
    bound.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(support) == 0:
        raise ValueError("support cloud must be non-empty")
    cell = float(grid_cell) if grid_cell is not None else _default_grid_cell(support)
    grid = build_grid_index(support, cell)
    cell_coords = np.array(list(grid.cells.keys()), dtype=np.int64)
    cell_points = list(grid.cells.values())

    all_indices = []
    offsets = np.zeros(len(query) + 1, dtype=np.int64)
    pos = support.positions
    for qi, q in enumerate(query.positions):
        center = np.floor(q / cell).astype(np.int64)
        # visit occupied cells ring by ring (Chebyshev distance order);
        # after finishing ring L, any unseen point is at distance >= L * cell
        cheb = np.abs(cell_coords - center).max(axis=1)
        order = np.argsort(cheb, kind="stable")
        cand = []
        found = 0
        ci = 0
        while ci < len(order):
            ring = cheb[order[ci]]
            while ci < len(order) and cheb[order[ci]] == ring:
                hit = cell_points[order[ci]]
                cand.append(hit)
                found += len(hit)
                ci += 1
            if found >= k:
                idx = np.concatenate(cand)
                d = np.linalg.norm(pos[idx] - q, axis=1)
                kth = np.partition(d, k - 1)[k - 1]
                # strict: a tied unseen point with a smaller index must win
                if kth < ring * cell:
                    break
        idx = np.concatenate(cand)
        d = np.linalg.norm(pos[idx] - q, axis=1)
        take = min(k, len(idx))
        # ties at the k-th distance break toward the smallest support index
        sel = idx[np.lexsort((idx, d))[:take]]
        sel.sort()
        all_indices.append(sel)
        offsets[qi + 1] = offsets[qi] + take
    indices = np.concatenate(all_indices) if all_indices else np.empty(0, dtype=np.int64)
    return NeighborList(offsets, indices)


def ball_query(query, support, radius, max_neighbors=None):
    """All support points within `radius` (inclusive) of each query point.

    If `max_neighbors` is set and exceeded, the closest are kept (ties ->
    smallest index). Queries with no point in range get an empty range.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(support) == 0:
        raise ValueError("support cloud must be non-empty")
    grid = build_grid_index(support, radius)
    pos = support.positions
    all_indices = []
    offsets = np.zeros(len(query) + 1, dtype=np.int64)
    for qi, q in enumerate(query.positions):
        cx, cy, cz = np.floor(q / radius).astype(np.int64)
        cand = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    hit = grid.cells.get((cx + dx, cy + dy, cz + dz))
                    if hit is not None:
                        cand.append(hit)
        if cand:
            idx = np.concatenate(cand)
            d = np.linalg.norm(pos[idx] - q, axis=1)
            inside = d <= radius
            idx, d = idx[inside], d[inside]
            if max_neighbors is not None and len(idx) > max_neighbors:
                idx = idx[np.lexsort((idx, d))[:max_neighbors]]
            sel = np.sort(idx)
        else:
            sel = np.empty(0, dtype=np.int64)
        all_indices.append(sel)
        offsets[qi + 1] = offsets[qi] + len(sel)
    indices = np.concatenate(all_indices) if all_indices else np.empty(0, dtype=np.int64)
    return NeighborList(offsets, indices)


def farthest_distance_stats(neighbors, query, support, cell_size):
    """Mean and population variance of (max neighbor distance / cell_size)
    over all queries with at least one neighbor."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    vals = []
    for i in range(neighbors.num_queries):
        idx = neighbors.neighbors(i)
        if len(idx) == 0:
            continue
        d = np.linalg.norm(support.positions[idx] - query.positions[i], axis=1)
        vals.append(d.max() / cell_size)
    if not vals:
        raise StatisticsError("all neighborhoods are empty")
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.var())
