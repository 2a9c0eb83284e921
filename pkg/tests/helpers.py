"""Builders shared between unit and acceptance tests."""

import numpy as np

from melroi.core import PatchRecord, ScoreTriplet

H_AND_E = [
    np.array([[0.55, 0.20], [0.70, 0.90], [0.45, 0.30]]),
    np.array([[0.60, 0.10], [0.75, 0.95], [0.35, 0.15]]),
    np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]]),
]


def unit_columns(m):
    return m / np.linalg.norm(m, axis=0)


def two_stain_image(matrix, rng, side=240):
    """Uint8 image mixing pure-H, pure-E and mixed pixels rendered through ``matrix``."""
    m = unit_columns(np.asarray(matrix, float))
    n = side * side
    third = n // 3
    c = np.zeros((n, 2))
    c[:third, 0] = rng.uniform(0.6, 1.6, third)
    c[third:2 * third, 1] = rng.uniform(2.2, 2.4, third) if m[:, 1].min() < 0.1 else \
        rng.uniform(0.8, 1.8, third)
    c[2 * third:] = rng.uniform(0.3, 1.2, (n - 2 * third, 2))
    od = c @ m.T
    rgb = np.clip(np.rint(256.0 * 10.0 ** (-od) - 1.0), 0, 255).astype(np.uint8)
    return rgb.reshape(side, side, 3), c.reshape(side, side, 2)


def render(matrix, conc):
    m = unit_columns(np.asarray(matrix, float))
    od = conc @ m.T
    return np.clip(np.rint(256.0 * 10.0 ** (-od) - 1.0), 0, 255).astype(np.uint8)


def random_triplet(rng):
    p = rng.dirichlet([1.0, 1.0, 1.0])
    return ScoreTriplet(float(p[0]), float(p[1]), max(0.0, float(1.0 - p[0] - p[1])))


def scored_records(rng, n, cols=None):
    cols = cols or max(1, int(np.ceil(np.sqrt(n))))
    return [PatchRecord(i % cols, i // cols, True, scores=random_triplet(rng)) for i in range(n)]


def _four_connected(cells) -> bool:
    cells = set(cells)
    if not cells:
        return True
    start = next(iter(cells))
    seen, stack = {start}, [start]
    while stack:
        x, y = stack.pop()
        for nb in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(cells)


def is_simple_polyomino(cells) -> bool:
    """4-connected, hole-free and without diagonal pinch points."""
    cells = set(cells)
    if not _four_connected(cells):
        return False
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    box = {(x, y) for x in range(min(xs) - 1, max(xs) + 2) for y in range(min(ys) - 1, max(ys) + 2)}
    if not _four_connected(box - cells):
        return False
    for x in range(min(xs) - 1, max(xs) + 1):
        for y in range(min(ys) - 1, max(ys) + 1):
            a, b = (x, y) in cells, (x + 1, y + 1) in cells
            c, d = (x + 1, y) in cells, (x, y + 1) in cells
            if (a and b and not c and not d) or (c and d and not a and not b):
                return False
    return True


def random_polyomino(rng, cols, rows, target):
    """Grow a simply-connected cell set inside a cols x rows grid."""
    cells = {(int(rng.integers(cols)), int(rng.integers(rows)))}
    for _ in range(target * 20):
        if len(cells) >= target:
            break
        x, y = sorted(cells)[rng.integers(len(cells))]
        dx, dy = ((1, 0), (-1, 0), (0, 1), (0, -1))[rng.integers(4)]
        nb = (x + dx, y + dy)
        if nb in cells or not (0 <= nb[0] < cols and 0 <= nb[1] < rows):
            continue
        if is_simple_polyomino(cells | {nb}):
            cells.add(nb)
    return cells


def segments_cross(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two closed segments."""
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and \
            min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return any(o == 0 and on_seg(a, b, c) for o, a, b, c in
               ((o1, p1, p2, q1), (o2, p1, p2, q2), (o3, q1, q2, p1), (o4, q1, q2, p2)))


def is_simple_closed(poly) -> bool:
    if len(poly) < 4 or tuple(poly[0]) != tuple(poly[-1]):
        return False
    if len(set(map(tuple, poly[:-1]))) != len(poly) - 1:
        return False
    edges = list(zip(poly[:-1], poly[1:]))
    n = len(edges)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_cross(*edges[i], *edges[j]):
                return False
    return True
