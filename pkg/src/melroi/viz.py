"""Boundary, overlay and heatmap renderings of a slide's predicted ROI."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from .core import PatchGrid, PatchRecord, ScoreTriplet, SlideRaster, SlideResult, build_grid
from .exceptions import ConfigError, IdentityError, ValidationError
from .optics import DEFAULT_EPS, DEFAULT_MIN_PTS, largest_roi_cluster

# (dx, dy) unit steps along the cell-corner lattice
_EDGES = ((0, 0, 1, 0), (1, 0, 1, 1), (1, 1, 0, 1), (0, 1, 0, 0))


def _cross(a, b) -> int:
    return a[0] * b[1] - a[1] * b[0]


def _trace_loops(cells: set[tuple[int, int]]) -> list[list[tuple[int, int]]]:
    """All boundary loops of a union of unit cells, with the interior on the left."""
    directed = set()
    for cx, cy in cells:
        for x0, y0, x1, y1 in _EDGES:
            directed.add(((cx + x0, cy + y0), (cx + x1, cy + y1)))
    boundary = {e for e in directed if (e[1], e[0]) not in directed}
    outgoing: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for a, b in boundary:
        outgoing.setdefault(a, []).append(b)

    loops = []
    unused = set(boundary)
    while unused:
        start = min(unused, key=lambda e: (e[0][1], e[0][0], e[1][1], e[1][0]))
        loop = [start[0]]
        edge = start
        while True:
            unused.discard(edge)
            a, b = edge
            loop.append(b)
            d_in = (b[0] - a[0], b[1] - a[1])
            options = [c for c in outgoing.get(b, ()) if (b, c) in unused]
            if not options:
                break
            # at pinch points keep turning away from the interior so diagonal
            # neighbours end up on one loop
            options.sort(key=lambda c: _cross(d_in, (c[0] - b[0], c[1] - b[1])))
            edge = (b, options[0])
        loops.append(loop)
    return loops


def _simplify(loop: list[tuple[int, int]]) -> list[tuple[int, int]]:
    pts = loop[:-1]
    out = []
    n = len(pts)
    for i in range(n):
        prev, cur, nxt = pts[i - 1], pts[i], pts[(i + 1) % n]
        if _cross((cur[0] - prev[0], cur[1] - prev[1]), (nxt[0] - cur[0], nxt[1] - cur[1])) != 0:
            out.append(cur)
    k = min(range(len(out)), key=lambda i: (out[i][1], out[i][0]))
    out = out[k:] + out[:k]
    return out + [out[0]]


def shoelace(poly: Sequence[tuple[float, float]]) -> float:
    """Signed area; positive for the orientation :func:`trace_boundary` emits."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float((x[:-1] * y[1:] - x[1:] * y[:-1]).sum())


def trace_boundary(subset: Sequence[tuple[int, int]], grid: PatchGrid) -> list[tuple[int, int]]:
    """Outer contour of the union of the subset's patch squares, in pixel coordinates.

    Returns a closed vertex list (first == last) starting at the top-left-most
    corner, oriented so the shoelace area is positive, with collinear points
    removed. For a disconnected subset the largest outer loop is returned.
    """
    cells = {(int(x), int(y)) for x, y in subset}
    if not cells:
        raise ValidationError("cannot trace the boundary of an empty subset")
    for x, y in cells:
        if not grid.contains(x, y):
            raise IdentityError(f"patch ({x}, {y}) outside the {grid.cols}x{grid.rows} grid")
    loops = [_simplify(l) for l in _trace_loops(cells)]
    outer = max(loops, key=shoelace)
    s = grid.patch_size
    return [(x * s, y * s) for x, y in outer]


class RenderMode(str, Enum):
    BOUNDARY = "boundary"
    OVERLAY = "overlay"
    HEATMAP = "heatmap"


@dataclass(frozen=True)
class RenderSpec:
    mode: RenderMode = RenderMode.OVERLAY
    overlay_mask_color: tuple[int, int, int, float] = (0, 0, 255, 0.5)
    boundary_color: tuple[int, int, int] = (0, 255, 0)
    boundary_width: int = 8
    heatmap_low: tuple[int, int, int] = (0, 0, 255)
    heatmap_high: tuple[int, int, int] = (255, 0, 0)
    min_pts: int = DEFAULT_MIN_PTS
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "mode", RenderMode(self.mode))
        if not 0.0 <= self.overlay_mask_color[3] <= 1.0:
            raise ConfigError("overlay alpha must lie in [0, 1]")
        if self.boundary_width < 1:
            raise ConfigError("boundary_width must be positive")


ScoreInput = Union[Mapping[tuple[int, int], ScoreTriplet], Sequence[PatchRecord]]


def _score_map(scores: ScoreInput) -> dict[tuple[int, int], ScoreTriplet]:
    if isinstance(scores, Mapping):
        return dict(scores)
    return {r.key: r.scores for r in scores if r.scores is not None}


def _rgba(px: np.ndarray) -> np.ndarray:
    out = np.empty(px.shape[:2] + (4,), dtype=np.uint8)
    out[..., :3] = px
    out[..., 3] = 255
    return out


def overlay_mask(grid: PatchGrid, shape: tuple[int, int], roi) -> np.ndarray:
    """True where the overlay tint applies: everywhere except ROI patches."""
    mask = np.ones(shape, dtype=bool)
    s = grid.patch_size
    for gx, gy in roi:
        mask[gy * s:(gy + 1) * s, gx * s:(gx + 1) * s] = False
    return mask


def heatmap_color(t: np.ndarray, low, high) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    return np.rint((1 - t) * np.asarray(low, float) + t * np.asarray(high, float)).astype(np.uint8)


def render(slide: SlideRaster, result: SlideResult, scores: ScoreInput,
           spec: RenderSpec = RenderSpec(), grid: Optional[PatchGrid] = None) -> np.ndarray:
    """``(H, W, 4)`` uint8 rendering of ``result`` over the slide."""
    if result.slide_id != slide.slide_id:
        raise IdentityError(f"result for {result.slide_id!r} rendered on {slide.slide_id!r}")
    grid = grid or build_grid(slide)
    if grid.slide_id != slide.slide_id or build_grid(slide, grid.patch_size) != grid:
        raise IdentityError("grid does not match the slide raster")
    smap = _score_map(scores)
    for key in list(smap) + list(result.roi_patches):
        if not grid.contains(*key):
            raise IdentityError(f"patch {key} lies outside the slide grid")

    px = slide.pixels
    out = _rgba(px)
    s = grid.patch_size

    if spec.mode is RenderMode.OVERLAY:
        *color, alpha = spec.overlay_mask_color
        mask = overlay_mask(grid, px.shape[:2], result.roi_patches)
        blended = np.rint((1 - alpha) * px[mask].astype(np.float64)
                          + alpha * np.asarray(color, dtype=np.float64))
        out[..., :3][mask] = np.clip(blended, 0, 255).astype(np.uint8)

    elif spec.mode is RenderMode.HEATMAP:
        cls = result.predicted_label.patch_class
        keys = sorted(smap, key=lambda k: (k[1], k[0]))
        if keys:
            vals = np.array([smap[k].for_class(cls) for k in keys])
            lo, hi = vals.min(), vals.max()
            t = (vals - lo) / (hi - lo) if hi > lo else np.full(len(vals), 0.5)
            colors = heatmap_color(t, spec.heatmap_low, spec.heatmap_high)
            for (gx, gy), c in zip(keys, colors):
                out[gy * s:(gy + 1) * s, gx * s:(gx + 1) * s, :3] = c

    elif spec.mode is RenderMode.BOUNDARY:
        if result.roi_patches:
            cluster = largest_roi_cluster(result.roi_patches, spec.min_pts, spec.eps)
            poly = trace_boundary(cluster, grid)
            im = Image.fromarray(out, mode="RGBA")
            ImageDraw.Draw(im).line([tuple(p) for p in poly],
                                    fill=tuple(spec.boundary_color) + (255,),
                                    width=spec.boundary_width, joint="curve")
            out = np.asarray(im).copy()
    return out
