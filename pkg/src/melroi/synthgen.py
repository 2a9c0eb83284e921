"""Synthetic H&E-like slide cohorts with known ROI geometry.

Each slide is a smooth tissue blob on a white background, with one to three
ROI polygons inside it. Pixels are rendered through a per-slide jittered
stain matrix from H/E concentration fields; ROI texture is denser in
hematoxylin with nucleus-like speckle. The class signal is an RGB shift of
ROI pixels along ``CLASS_DIRECTION``: melanoma darker and bluer, nevus lighter
and browner, separated by ``class_separability`` RGB units.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .annotations import (AnnotationRegion, AnnotationSet, serialize_annotation_xml,
                          winding_numbers)
from .core import (PATCH_SIZE, ManifestEntry, SlideLabel, SlideRaster, save_png,
                   write_manifest)
from .exceptions import ConfigError, GenerationError
from .preprocess import DEFAULT_REFERENCE, StainProfile

CLASS_DIRECTION = np.array([1.0, 1.0, 0.3]) / np.linalg.norm([1.0, 1.0, 0.3])
CENTER_MARGIN = 2.0


@dataclass(frozen=True)
class CohortSpec:
    n_slides: int = 160
    class_balance: float = 86 / 160
    slide_size: tuple[int, int] = (2048, 2048)
    roi_count_range: tuple[int, int] = (1, 3)
    roi_area_fraction_range: tuple[float, float] = (0.05, 0.3)
    class_separability: float = 40.0
    annotation_coverage: float = 0.7
    test_annotation_coverage: float = 1.0
    stain_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "slide_size", tuple(int(v) for v in self.slide_size))
        object.__setattr__(self, "roi_count_range", tuple(int(v) for v in self.roi_count_range))
        object.__setattr__(self, "roi_area_fraction_range",
                           tuple(float(v) for v in self.roi_area_fraction_range))
        if self.n_slides < 1:
            raise ConfigError("n_slides must be positive")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ConfigError("class_balance must lie in [0, 1]")
        w, h = self.slide_size
        if w < PATCH_SIZE or h < PATCH_SIZE:
            raise ConfigError(f"slide_size must be at least {PATCH_SIZE} px per side")
        lo, hi = self.roi_count_range
        if not 1 <= lo <= hi:
            raise ConfigError("roi_count_range must satisfy 1 <= low <= high")
        flo, fhi = self.roi_area_fraction_range
        if not 0.0 < flo <= fhi < 1.0:
            raise ConfigError("roi_area_fraction_range must satisfy 0 < low <= high < 1")
        if self.class_separability < 0:
            raise ConfigError("class_separability must be non-negative")
        for name in ("annotation_coverage", "test_annotation_coverage"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.stain_jitter < 0.5:
            raise ConfigError("stain_jitter must lie in [0, 0.5)")


@dataclass(eq=False)
class SyntheticSlide:
    raster: SlideRaster
    label: SlideLabel
    annotation: AnnotationSet
    annotation_full: AnnotationSet
    roi_mask: np.ndarray
    roi_patches: np.ndarray
    stains: StainProfile
    polygons: list[np.ndarray] = field(default_factory=list)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def slide_labels(spec: CohortSpec) -> list[SlideLabel]:
    n_mel = _round_half_up(spec.n_slides * spec.class_balance)
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    mel = set(rng.permutation(spec.n_slides)[:n_mel].tolist())
    return [SlideLabel.MELANOMA if i in mel else SlideLabel.NEVUS for i in range(spec.n_slides)]


def smooth_polygon(rng: np.random.Generator, center, radius: float, n_vertices: int = 24,
                   wobble: float = 0.18) -> np.ndarray:
    """Star-shaped smooth loop: radius modulated by a few low harmonics."""
    theta = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    r = np.ones_like(theta)
    for k in (2, 3, 4):
        r += rng.uniform(0, wobble / k * 2) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    r = np.clip(r, 0.55, None) * radius
    return np.column_stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)])


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _segment_distances(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed polyline ``poly``."""
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    p = points[:, None, :]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def _polygons_close(a: np.ndarray, b: np.ndarray, gap: float) -> bool:
    if (winding_numbers(a, b) != 0).any() or (winding_numbers(b, a) != 0).any():
        return True
    return bool(_segment_distances(a, b).min() < gap or _segment_distances(b, a).min() < gap)


def _fill(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    im = Image.new("L", (width, height), 0)
    ImageDraw.Draw(im).polygon([tuple(v) for v in poly.tolist()], fill=1)
    return np.asarray(im, dtype=bool)


def _smooth_noise(rng: np.random.Generator, shape, scale: int = 32, sigma: float = 1.0) -> np.ndarray:
    h, w = shape
    small = rng.standard_normal((h // scale + 3, w // scale + 3))
    small = gaussian_filter(small, sigma)
    small /= small.std() + 1e-12
    sh, sw = small.shape
    big = Image.fromarray(small.astype(np.float32), mode="F").resize(
        (sw * scale, sh * scale), Image.BILINEAR)
    return np.asarray(big, dtype=np.float32)[:h, :w]


def _speckle(rng: np.random.Generator, shape, density: float, sigma: float = 1.5) -> np.ndarray:
    spots = (rng.random(shape, dtype=np.float32) < density).astype(np.float32)
    field_ = gaussian_filter(spots, sigma)
    return field_ / (field_.max() + 1e-12)


def _jitter_stains(rng: np.random.Generator, jitter: float) -> StainProfile:
    m = DEFAULT_REFERENCE.stain_matrix + rng.uniform(-jitter, jitter, size=(3, 2))
    return StainProfile(np.clip(m, 0.02, None), DEFAULT_REFERENCE.max_concentrations)


def _try_roi(rng, area: float, tissue_poly: np.ndarray, centers: np.ndarray,
             placed: list[np.ndarray], size: tuple[int, int]) -> Optional[np.ndarray]:
    w, h = size
    # sample the center from tissue vertices pulled inward, then scale to the target area
    v = tissue_poly[rng.integers(len(tissue_poly))]
    c = tissue_poly.mean(axis=0) + rng.uniform(0, 0.8) * (v - tissue_poly.mean(axis=0))
    poly = smooth_polygon(rng, c, 1.0)
    poly = np.rint(c + (poly - c) * math.sqrt(area / polygon_area(poly)))
    if poly.min() < 2 or poly[:, 0].max() > w - 3 or poly[:, 1].max() > h - 3:
        return None
    if (winding_numbers(poly, tissue_poly) == 0).any():
        return None
    if _segment_distances(poly, tissue_poly).min() < 24:
        return None
    if any(_polygons_close(poly, q, 16.0) for q in placed):
        return None
    if _segment_distances(centers, poly).min() < CENTER_MARGIN:
        return None
    if not (winding_numbers(centers, poly) != 0).any():
        return None
    return poly


def _place_rois(rng, spec: CohortSpec, tissue_poly: np.ndarray, centers: np.ndarray,
                restarts: int = 40, tries: int = 150) -> list[np.ndarray]:
    w, h = spec.slide_size
    n_roi = int(rng.integers(spec.roi_count_range[0], spec.roi_count_range[1] + 1))
    total = rng.uniform(*spec.roi_area_fraction_range) * w * h
    shares = np.sort(rng.dirichlet(np.full(n_roi, 4.0)))[::-1]
    for _ in range(restarts):
        placed: list[np.ndarray] = []
        for share in shares:
            for _ in range(tries):
                poly = _try_roi(rng, share * total, tissue_poly, centers, placed, (w, h))
                if poly is not None:
                    placed.append(poly)
                    break
            else:
                break
        if len(placed) == n_roi:
            return placed
    raise GenerationError(f"could not fit {n_roi} ROIs covering {total:.0f} px^2 "
                          f"into a {w}x{h} slide")


def generate_slide(spec: CohortSpec, index: int, label: SlideLabel,
                   seed_seq: np.random.SeedSequence) -> SyntheticSlide:
    rng = np.random.default_rng(seed_seq)
    w, h = spec.slide_size
    slide_id = f"slide_{index:03d}"
    cols, rows = w // PATCH_SIZE, h // PATCH_SIZE
    gy, gx = np.mgrid[0:rows, 0:cols]
    half = PATCH_SIZE // 2
    centers = np.column_stack([gx.ravel() * PATCH_SIZE + half,
                               gy.ravel() * PATCH_SIZE + half]).astype(float)

    tissue_poly = smooth_polygon(rng, (w / 2 + rng.uniform(-0.03, 0.03) * w,
                                       h / 2 + rng.uniform(-0.03, 0.03) * h),
                                 0.5 * min(w, h), n_vertices=32, wobble=0.1)
    tissue_poly[:, 0] = np.clip(tissue_poly[:, 0], 0, w - 1)
    tissue_poly[:, 1] = np.clip(tissue_poly[:, 1], 0, h - 1)
    polys = _place_rois(rng, spec, tissue_poly, centers)

    tissue = gaussian_filter(_fill(tissue_poly, w, h).astype(np.float32), 3.0)
    roi = np.zeros((h, w), dtype=bool)
    for p in polys:
        roi |= _fill(p, w, h)

    shape = (h, w)
    n1, n2 = _smooth_noise(rng, shape), _smooth_noise(rng, shape)
    fibre = _speckle(rng, shape, 0.01, 2.0)
    nuclei = _speckle(rng, shape, 0.02, 1.5)
    conc_h = tissue * (0.32 + 0.05 * n1 + 0.25 * fibre)
    conc_e = tissue * (0.80 + 0.10 * n2)
    conc_h = np.where(roi, 0.80 + 0.08 * n1 + 0.60 * nuclei, conc_h)
    conc_e = np.where(roi, 0.50 + 0.08 * n2, conc_e)
    scale = rng.uniform(0.85, 1.15)
    conc = np.clip(np.stack([conc_h, conc_e], axis=-1) * scale, 0, None)

    stains = _jitter_stains(rng, spec.stain_jitter)
    od = conc @ stains.stain_matrix.T.astype(np.float32)
    rgb = 256.0 * np.power(10.0, -od, dtype=np.float32) - 1.0
    shift = (-0.5 if label is SlideLabel.MELANOMA else 0.5) * spec.class_separability
    rgb[roi] += (shift * CLASS_DIRECTION).astype(np.float32)
    rgb += rng.normal(0, 2.0, size=rgb.shape).astype(np.float32)
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    patch_flags = roi[centers[:, 1].astype(int), centers[:, 0].astype(int)].reshape(rows, cols)

    regions = [AnnotationRegion(str(i + 1), tuple(map(tuple, p.tolist())), label.patch_class)
               for i, p in enumerate(polys)]
    cov = spec.annotation_coverage
    n_annot = 0 if cov == 0 else max(1, _round_half_up(cov * len(regions)))
    chosen = sorted(rng.permutation(len(regions))[:n_annot].tolist())
    full_cov = spec.test_annotation_coverage
    n_full = 0 if full_cov == 0 else max(1, _round_half_up(full_cov * len(regions)))
    return SyntheticSlide(
        raster=SlideRaster(slide_id, pixels, true_label=label),
        label=label,
        annotation=AnnotationSet(slide_id, tuple(regions[i] for i in chosen)),
        annotation_full=AnnotationSet(slide_id, tuple(regions[:n_full])),
        roi_mask=roi,
        roi_patches=patch_flags,
        stains=stains,
        polygons=polys,
    )


def _generate_one(args):
    spec, index, label, seq = args
    return generate_slide(spec, index, label, seq)


def generate_cohort(spec: CohortSpec, workers: int = 1) -> list[SyntheticSlide]:
    """Generate every slide of ``spec``; output does not depend on ``workers``."""
    labels = slide_labels(spec)
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.n_slides)
    jobs = [(spec, i, labels[i], seqs[i]) for i in range(spec.n_slides)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_generate_one, jobs))
    return [_generate_one(j) for j in jobs]


def write_slide(slide: SyntheticSlide, out_dir: Path) -> ManifestEntry:
    sid = slide.raster.slide_id
    img, ann, full, mask = (out_dir / f"{sid}{suffix}" for suffix in
                            (".png", ".xml", ".full.xml", ".mask.png"))
    save_png(img, slide.raster.pixels)
    ann.write_text(serialize_annotation_xml(slide.annotation))
    full.write_text(serialize_annotation_xml(slide.annotation_full))
    save_png(mask, slide.roi_mask.astype(np.uint8) * 255)
    return ManifestEntry(sid, img, slide.label, ann, full, mask)


def _write_one(args):
    spec, index, label, seq, out_dir = args
    return write_slide(generate_slide(spec, index, label, seq), out_dir)


def write_cohort(spec: CohortSpec, out_dir, workers: int = 1) -> Path:
    """Generate and write a cohort; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = slide_labels(spec)
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.n_slides)
    jobs = [(spec, i, labels[i], seqs[i], out_dir) for i in range(spec.n_slides)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_write_one, jobs))
    else:
        entries = [_write_one(j) for j in jobs]
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest
