import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melroi.exceptions import SingleClusterFallback, ValidationError
from melroi.optics import OPTICSClustering, extract_clusters, largest_roi_cluster, optics_order

import oracles


def grid_points(rng, n, side):
    cells = rng.choice(side * side, size=n, replace=False)
    return [(int(c % side), int(c // side)) for c in cells]


def same_partition(a, b):
    mapping = {}
    for x, y in zip(a, b):
        if (x < 0) != (y < 0):
            return False
        if x >= 0 and mapping.setdefault(x, y) != y:
            return False
    return len(set(mapping.values())) == len(mapping)


def test_matches_bruteforce_optics():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = grid_points(rng, int(rng.integers(2, 60)), 12)
        plot = optics_order(pts, 2, 1.5)
        order, reach, core = oracles.optics_bruteforce(pts, 2, 1.5)
        assert plot.ordering.tolist() == order
        assert np.array_equal(plot.reachability, np.array(reach))
        assert np.array_equal(plot.core_distances, np.array(core))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 20), st.floats(0, 20)), min_size=3, max_size=40, unique=True),
       st.integers(2, 4), st.floats(0.5, 4.0))
def test_threshold_extraction_equals_dbscan(pts, min_pts, eps):
    plot = optics_order(pts, min_pts, eps)
    assert sorted(plot.ordering.tolist()) == list(range(len(pts)))
    got = extract_clusters(plot, eps, pts)
    is_core, want = oracles.dbscan_bruteforce(pts, min_pts, eps)
    assert same_partition(got, want) or _border_ambiguity(pts, got, want, is_core, eps)


def _border_ambiguity(pts, got, want, is_core, eps):
    # core assignments must agree exactly; border points may join any cluster that reaches them
    core_idx = [i for i, c in enumerate(is_core) if c]
    if not same_partition([got[i] for i in core_idx], [want[i] for i in core_idx]):
        return False
    for i, c in enumerate(is_core):
        if c:
            continue
        claim = {got[j] for j in core_idx if math.dist(pts[i], pts[j]) <= eps}
        if (got[i] < 0) != (not claim) or (claim and got[i] not in claim):
            return False
    return True


def test_two_blobs_have_one_jump():
    blob_a = [(x, y) for x in range(5) for y in range(2)]
    blob_b = [(x + 50, y) for x in range(5) for y in range(2)]
    plot = optics_order(blob_a + blob_b, 2, 1.5)
    r = plot.reachability_in_order()
    assert np.isinf(r).sum() == 2 and np.isinf(r[0])
    assert (r[1:][~np.isinf(r[1:])] <= 1.5).all()


def test_errors_and_csv():
    with pytest.raises(SingleClusterFallback):
        optics_order([(0, 0)], 2)
    with pytest.raises(ValidationError):
        optics_order([(0, 0), (1, 1)], 1)
    csv = optics_order([(0, 0), (1, 0)], 2).to_csv().splitlines()
    assert csv[0] == "order_index,point_id,reachability" and csv[1].endswith("undefined")
    with pytest.raises(ValidationError):
        OPTICSClustering(threshold=3.0).fit([(0, 0), (1, 0)])


def test_largest_cluster_examples():
    big = [(x, y) for x in range(6) for y in range(5)]
    small = [(x + 20, y) for x in range(5) for y in range(2)]
    assert sorted(largest_roi_cluster(big + small)) == sorted(big)
    tie = largest_roi_cluster([(5, 5), (6, 5), (0, 9), (1, 9)])
    assert tie == [(5, 5), (6, 5)]
    assert largest_roi_cluster([(3, 3)]) == [(3, 3)]
    with pytest.raises(ValidationError):
        largest_roi_cluster([])


def test_largest_cluster_matches_flood_fill():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pts = grid_points(rng, int(rng.integers(1, 80)), 15)
        assert largest_roi_cluster(pts) == oracles.largest_component(pts)
