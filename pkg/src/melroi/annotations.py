"""ImageScope-style annotation XML, polygon rasterization onto the patch grid,
and the annotated ratio used to size the predicted ROI.

Accepted layout::

    <Annotations>
      <Annotation Id="1">
        <Regions>
          <Region Id="1" Text="melanoma">
            <Vertices><Vertex X="10" Y="20"/>...</Vertices>
          </Region>
        </Regions>
      </Annotation>
    </Annotations>
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import PatchClass, PatchGrid, PatchRecord, check_same_slide
from .exceptions import EmptySlideError, ParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnotationRegion:
    region_id: str
    vertices: tuple[tuple[float, float], ...]
    assigned_class: Optional[PatchClass] = None

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValidationError(f"region {self.region_id!r} has fewer than 3 vertices")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)


@dataclass(frozen=True)
class AnnotationSet:
    slide_id: str
    regions: tuple[AnnotationRegion, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate region ids in annotation set for {self.slide_id!r}")

    def __len__(self):
        return len(self.regions)


def parse_annotation_xml(xml_text: str, slide_id: Optional[str] = None,
                         bounds: Optional[tuple[float, float]] = None) -> AnnotationSet:
    """Parse annotation XML into an :class:`AnnotationSet`.

    ``bounds=(width, height)`` clamps vertices into ``[0, width] x [0, height]``.
    Regions with fewer than three vertices are skipped and reported in
    ``AnnotationSet.warnings``.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ParseError(f"malformed annotation XML: {exc.msg if hasattr(exc, 'msg') else exc}",
                         line=line, column=col) from None
    if root.tag != "Annotations":
        raise ParseError(f"expected <Annotations> root, found <{root.tag}>")
    sid = slide_id if slide_id is not None else root.get("SlideId", "")

    regions: list[AnnotationRegion] = []
    warnings: list[str] = []
    seen: set[str] = set()
    for ann in root.findall("Annotation"):
        ann_id = ann.get("Id", "")
        for reg in ann.findall("Regions/Region"):
            rid = reg.get("Id", str(len(regions) + 1))
            if rid in seen:
                rid = f"{ann_id}.{rid}"
            verts = []
            for v in reg.findall("Vertices/Vertex"):
                try:
                    x, y = float(v.get("X")), float(v.get("Y"))
                except (TypeError, ValueError):
                    raise ParseError(f"region {rid!r}: vertex without numeric X/Y") from None
                if bounds is not None:
                    x = min(max(x, 0.0), float(bounds[0]))
                    y = min(max(y, 0.0), float(bounds[1]))
                verts.append((x, y))
            if len(verts) < 3:
                msg = f"region {rid!r} skipped: {len(verts)} vertices"
                log.warning(msg)
                warnings.append(msg)
                continue
            text = (reg.get("Text") or "").strip().lower()
            cls = PatchClass(text) if text in {c.value for c in PatchClass} else None
            seen.add(rid)
            regions.append(AnnotationRegion(rid, tuple(verts), cls))
    return AnnotationSet(sid, tuple(regions), tuple(warnings))


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_annotation_xml(aset: AnnotationSet) -> str:
    root = ET.Element("Annotations", {"SlideId": aset.slide_id})
    if aset.regions:
        ann = ET.SubElement(root, "Annotation", {"Id": "1"})
        regs = ET.SubElement(ann, "Regions")
        for r in aset.regions:
            attrs = {"Id": r.region_id}
            if r.assigned_class is not None:
                attrs["Text"] = r.assigned_class.value
            reg = ET.SubElement(regs, "Region", attrs)
            verts = ET.SubElement(reg, "Vertices")
            for x, y in r.vertices:
                ET.SubElement(verts, "Vertex", {"X": _num(x), "Y": _num(y)})
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def winding_numbers(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Winding number of each point in ``points`` (n, 2) around a closed polygon (m, 2)."""
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    x0, y0 = polygon[:, 0][None, :], polygon[:, 1][None, :]
    rolled = np.roll(polygon, -1, axis=0)
    x1, y1 = rolled[:, 0][None, :], rolled[:, 1][None, :]
    # > 0 when the point lies left of the directed edge
    side = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
    up = (y0 <= py) & (y1 > py) & (side > 0)
    down = (y0 > py) & (y1 <= py) & (side < 0)
    return up.sum(axis=1) - down.sum(axis=1)


def points_in_regions(points: np.ndarray, aset: AnnotationSet) -> np.ndarray:
    """Nonzero-winding membership of ``points`` in any region of ``aset``."""
    inside = np.zeros(len(points), dtype=bool)
    for r in aset.regions:
        inside |= winding_numbers(points, r.as_array()) != 0
    return inside


def patch_membership(grid: PatchGrid, aset: AnnotationSet) -> np.ndarray:
    """``(rows, cols)`` flags: patch center lies inside at least one region."""
    check_same_slide(grid, aset)
    half = grid.patch_size / 2
    gy, gx = np.mgrid[0:grid.rows, 0:grid.cols]
    centers = np.column_stack([
        gx.ravel() * grid.patch_size + half,
        gy.ravel() * grid.patch_size + half,
    ])
    return points_in_regions(centers, aset).reshape(grid.rows, grid.cols)


def annotated_ratio(patches: Sequence[PatchRecord]) -> float:
    """beta = (# tissue patches inside annotations) / (# tissue patches)."""
    c_p = sum(1 for p in patches if p.tissue)
    if c_p == 0:
        raise EmptySlideError("no tissue patches: annotated ratio undefined")
    a_p = sum(1 for p in patches if p.tissue and p.in_annotation)
    return a_p / c_p
