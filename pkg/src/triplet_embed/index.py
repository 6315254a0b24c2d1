"""Exact k-nearest-neighbor search with a ball tree.

Nodes live in flat arrays: ``start``/``end`` delimit a node's slice of the
permuted point order, ``center`` is the mean of its points and ``radius``
the largest distance from that mean. Internal nodes split at the median of
the dimension with the largest spread; ``left``/``right`` are -1 for leaves.

Neighbors are ordered by (distance, point index), so ties resolve toward
the lower index in both :func:`brute_force` and :meth:`BallTree.query`.
"""

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import StructuralError


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray
    leaves_visited: int = 0

    def __len__(self):
        return len(self.indices)


def _distances(points, q):
    # column-by-column accumulation: identical results for any row subset
    diff = points - q
    d2 = np.zeros(len(points))
    for j in range(diff.shape[1]):
        d2 += diff[:, j] * diff[:, j]
    return np.sqrt(d2)


def _check_query(points, q, k):
    if q.shape != (points.shape[1],):
        raise StructuralError(f"query has shape {q.shape}, index dimension is {points.shape[1]}")
    if not 1 <= k <= len(points):
        raise ValueError(f"k={k} outside 1..{len(points)}")


def brute_force(points, q, k):
    points = np.asarray(points, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_query(points, q, k)
    d = _distances(points, q)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return NeighborList(order, d[order], 0)


class BallTree:
    def __init__(self, points, leaf_size=30):
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise StructuralError("ball tree needs a non-empty (N, D) point array")
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.points = points
        self.points.setflags(write=False)
        self.leaf_size = leaf_size
        self.order = np.arange(len(points))
        starts, ends, lefts, rights, centers, radii = [], [], [], [], [], []

        def build(start, end):
            node = len(starts)
            idx = self.order[start:end]
            sub = points[idx]
            center = sub.mean(axis=0)
            starts.append(start)
            ends.append(end)
            centers.append(center)
            radii.append(float(_distances(sub, center).max()))
            lefts.append(-1)
            rights.append(-1)
            if end - start > leaf_size:
                spread = sub.max(axis=0) - sub.min(axis=0)
                dim = int(np.argmax(spread))
                self.order[start:end] = idx[np.argsort(sub[:, dim], kind="stable")]
                mid = start + (end - start) // 2
                lefts[node] = build(start, mid)
                rights[node] = build(mid, end)
            return node

        build(0, len(points))
        self.start = np.array(starts)
        self.end = np.array(ends)
        self.left = np.array(lefts)
        self.right = np.array(rights)
        self.center = np.array(centers)
        self.radius = np.array(radii)

    def __len__(self):
        return len(self.points)

    @property
    def n_nodes(self):
        return len(self.start)

    def query(self, q, k):
        """The k nearest points to ``q``, nearest first."""
        q = np.asarray(q, dtype=np.float64)
        _check_query(self.points, q, k)
        heap = []  # max-heap of (-dist, -index) holding the best k so far
        leaves = 0

        def worst():
            return -heap[0][0] if len(heap) == k else np.inf

        def lower_bound(node):
            d = _distances(self.center[node][None], q)[0]
            return max(0.0, d - self.radius[node])

        def visit(node, bound):
            nonlocal leaves
            # equality is kept: a tie at the k-th distance may still win on index
            if bound > worst() * (1 + 1e-12) + 1e-12:
                return
            if self.left[node] < 0:
                leaves += 1
                idx = self.order[self.start[node]:self.end[node]]
                for i, d in zip(idx, _distances(self.points[idx], q)):
                    item = (-d, -int(i))
                    if len(heap) < k:
                        heapq.heappush(heap, item)
                    elif item > heap[0]:
                        heapq.heapreplace(heap, item)
                return
            children = [(lower_bound(c), c) for c in (self.left[node], self.right[node])]
            children.sort()
            for b, c in children:
                visit(c, b)

        visit(0, lower_bound(0))
        best = sorted((-nd, -ni) for nd, ni in heap)
        return NeighborList(np.array([i for _, i in best], dtype=np.int64),
                            np.array([d for d, _ in best]), leaves)

    def check_invariants(self, tol=1e-9):
        """Raise AssertionError unless every point lies inside its ancestors' balls."""
        seen = np.zeros(len(self.points), dtype=np.int64)
        for node in range(self.n_nodes):
            idx = self.order[self.start[node]:self.end[node]]
            d = _distances(self.points[idx], self.center[node])
            assert np.all(d <= self.radius[node] + tol), f"node {node} does not contain its points"
            if self.left[node] < 0:
                assert 1 <= len(idx) <= self.leaf_size, f"leaf {node} holds {len(idx)} points"
                seen[idx] += 1
        assert np.all(seen == 1), "every point must sit in exactly one leaf"


def build(points, leaf_size=30):
    return BallTree(points, leaf_size)


def query(index, q, k):
    return index.query(q, k)
