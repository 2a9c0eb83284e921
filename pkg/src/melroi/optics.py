"""OPTICS ordering of ROI patch centers and DBSCAN-style cluster extraction.

Neighborhoods include the point itself, so ``min_pts=2`` makes any point with
one neighbor inside ``eps`` a core point. Seeds are processed in ascending
``(reachability, index)`` order and unprocessed points are visited by index,
which makes the ordering fully deterministic.
"""

from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from .exceptions import SingleClusterFallback, ValidationError

DEFAULT_EPS = 1.5
DEFAULT_MIN_PTS = 2


@dataclass(frozen=True, eq=False)
class ReachabilityPlot:
    """``reachability[i]`` and ``core_distances[i]`` refer to point ``i``; ``inf`` means undefined."""

    ordering: np.ndarray
    reachability: np.ndarray
    core_distances: np.ndarray

    def reachability_in_order(self) -> np.ndarray:
        return self.reachability[self.ordering]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("order_index,point_id,reachability\n")
        for k, p in enumerate(self.ordering):
            r = self.reachability[p]
            buf.write(f"{k},{p},{'undefined' if math.isinf(r) else repr(float(r))}\n")
        return buf.getvalue()


def _neighbourhoods(pts: np.ndarray, eps: float) -> list[list[tuple[float, int]]]:
    tree = cKDTree(pts)
    # slight over-query, then filter with the exact distance formula
    cand = tree.query_ball_point(pts, r=eps * (1 + 1e-9) + 1e-12)
    out = []
    for i, js in enumerate(cand):
        row = []
        for j in js:
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            d = math.sqrt(dx * dx + dy * dy)
            if d <= eps:
                row.append((d, j))
        row.sort()
        out.append(row)
    return out


def optics_order(points, min_pts: int = DEFAULT_MIN_PTS, eps: float = DEFAULT_EPS
                 ) -> ReachabilityPlot:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if min_pts < 2:
        raise ValidationError("min_pts must be at least 2")
    if n < min_pts:
        raise SingleClusterFallback(f"{n} points < min_pts={min_pts}")
    neigh = _neighbourhoods(pts, eps)
    core = np.array([row[min_pts - 1][0] if len(row) >= min_pts else np.inf for row in neigh])
    reach = np.full(n, np.inf)
    processed = np.zeros(n, dtype=bool)
    order: list[int] = []

    def expand(p, heap):
        for d, o in neigh[p]:
            if processed[o]:
                continue
            nr = max(core[p], d)
            if nr < reach[o]:
                reach[o] = nr
                heapq.heappush(heap, (nr, o))

    for start in range(n):
        if processed[start]:
            continue
        processed[start] = True
        order.append(start)
        if not math.isfinite(core[start]):
            continue
        heap: list[tuple[float, int]] = []
        expand(start, heap)
        while heap:
            r, q = heapq.heappop(heap)
            if processed[q] or r != reach[q]:
                continue
            processed[q] = True
            order.append(q)
            if math.isfinite(core[q]):
                expand(q, heap)
    return ReachabilityPlot(np.asarray(order, dtype=np.int64), reach, core)


def extract_clusters(plot: ReachabilityPlot, threshold: float, points=None) -> np.ndarray:
    """Cluster labels (``-1`` = noise) from a reachability threshold.

    Scanning the ordering, a reachability above ``threshold`` closes the
    current cluster and a new one opens at a core point. With ``points``, noise
    points within ``threshold`` of a core point are then handed to the earliest
    such cluster, which fixes border points the ordering visited before their
    cluster's core points.
    """
    n = len(plot.ordering)
    labels = np.full(n, -1, dtype=np.int64)
    current = -1
    for p in plot.ordering:
        if plot.reachability[p] > threshold:
            if plot.core_distances[p] <= threshold:
                current += 1
                labels[p] = current
        else:
            labels[p] = current
    if points is not None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        is_core = plot.core_distances <= threshold
        for p in np.flatnonzero(labels < 0):
            d = np.sqrt(((pts - pts[p]) ** 2).sum(axis=1))
            claim = labels[is_core & (d <= threshold)]
            if claim.size:
                labels[p] = claim.min()
    return labels


class OPTICSClustering(ClusterMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` computes the ordering, ``labels_`` the thresholded clusters."""

    def __init__(self, min_pts=DEFAULT_MIN_PTS, eps=DEFAULT_EPS, threshold=None):
        self.min_pts = min_pts
        self.eps = eps
        self.threshold = threshold

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 2)
        t = self.eps if self.threshold is None else self.threshold
        if t > self.eps:
            raise ValidationError("threshold must not exceed eps")
        try:
            plot = optics_order(X, self.min_pts, self.eps)
        except SingleClusterFallback:
            self.plot_ = None
            self.labels_ = np.zeros(len(X), dtype=np.int64)
            return self
        self.plot_ = plot
        self.ordering_ = plot.ordering
        self.reachability_ = plot.reachability
        self.core_distances_ = plot.core_distances
        self.labels_ = extract_clusters(plot, t, X)
        return self


def largest_roi_cluster(roi: Sequence[tuple[int, int]], min_pts: int = DEFAULT_MIN_PTS,
                        eps: float = DEFAULT_EPS, threshold=None) -> list[tuple[int, int]]:
    """The biggest cluster of ROI grid positions, sorted by ``(grid_y, grid_x)``.

    Ties go to the cluster holding the smallest ``(grid_y, grid_x)``. When every
    point is noise, single points count as clusters of size one.
    """
    keys = sorted({(int(x), int(y)) for x, y in roi}, key=lambda k: (k[1], k[0]))
    if not keys:
        raise ValidationError("ROI is empty")
    labels = OPTICSClustering(min_pts, eps, threshold).fit(np.asarray(keys, float)).labels_
    groups: dict[int, list[tuple[int, int]]] = {}
    for i, (k, lab) in enumerate(zip(keys, labels)):
        groups.setdefault(int(lab) if lab >= 0 else -(i + 1), []).append(k)
    # keys are sorted, so a group's first element is its (grid_y, grid_x) minimum
    best = min(groups.values(), key=lambda g: (-len(g), g[0][1], g[0][0]))
    return best
