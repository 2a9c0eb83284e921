"""Shared domain types and patch-grid geometry.

Patch identity is ``(slide_id, grid_x, grid_y)`` everywhere. Grid cell
``(gx, gy)`` covers pixel columns ``gx*256 .. gx*256+255`` and rows
``gy*256 .. gy*256+255``; border pixels that do not fill a whole patch are
discarded.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .exceptions import IdentityError, InvalidSlide, ValidationError

PATCH_SIZE = 256

PATCH_CSV_FIELDS = [
    "slide_id", "grid_x", "grid_y", "tissue", "label",
    "s_mel", "s_nev", "s_other", "in_annotation",
]


class SlideLabel(str, Enum):
    MELANOMA = "melanoma"
    NEVUS = "nevus"

    @property
    def patch_class(self) -> "PatchClass":
        return PatchClass(self.value)


class PatchClass(str, Enum):
    MELANOMA = "melanoma"
    NEVUS = "nevus"
    OTHER = "other"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)


# column order of every score matrix / classifier output
CLASS_ORDER = (PatchClass.MELANOMA, PatchClass.NEVUS, PatchClass.OTHER)


class Magnification(str, Enum):
    X20 = "20x"


@dataclass(frozen=True)
class ScoreTriplet:
    s_mel: float
    s_nev: float
    s_other: float

    def __post_init__(self):
        vals = (self.s_mel, self.s_nev, self.s_other)
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValidationError(f"scores must lie in [0, 1]: {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValidationError(f"scores must sum to 1, got {sum(vals)!r}")

    @classmethod
    def from_array(cls, row) -> "ScoreTriplet":
        a, b, c = (float(v) for v in row)
        return cls(a, b, c)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s_mel, self.s_nev, self.s_other)

    def for_class(self, cls: PatchClass) -> float:
        return self.as_tuple()[cls.index]

    @property
    def argmax(self) -> PatchClass:
        # first maximum wins, matching np.argmax
        return CLASS_ORDER[int(np.argmax(self.as_tuple()))]


@dataclass(frozen=True, eq=False)
class SlideRaster:
    slide_id: str
    pixels: np.ndarray
    magnification: Magnification = Magnification.X20
    true_label: Optional[SlideLabel] = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidSlide(f"{self.slide_id}: expected HxWx3 RGB raster, got {px.shape}")
        if px.dtype != np.uint8:
            raise InvalidSlide(f"{self.slide_id}: expected uint8 pixels, got {px.dtype}")
        px.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    slide_id: str
    cols: int
    rows: int
    patch_size: int = PATCH_SIZE

    @property
    def n_patches(self) -> int:
        return self.cols * self.rows

    def contains(self, grid_x: int, grid_y: int) -> bool:
        return 0 <= grid_x < self.cols and 0 <= grid_y < self.rows

    def positions(self) -> Iterator[tuple[int, int]]:
        """All ``(grid_x, grid_y)`` in row-major order."""
        for gy in range(self.rows):
            for gx in range(self.cols):
                yield gx, gy

    def center(self, grid_x: int, grid_y: int) -> tuple[int, int]:
        half = self.patch_size // 2
        return grid_x * self.patch_size + half, grid_y * self.patch_size + half


@dataclass(frozen=True)
class PatchRecord:
    grid_x: int
    grid_y: int
    tissue: bool
    label: Optional[PatchClass] = None
    scores: Optional[ScoreTriplet] = None
    in_annotation: bool = False

    def __post_init__(self):
        if self.scores is not None and not self.tissue:
            raise ValidationError(f"patch ({self.grid_x}, {self.grid_y}) has scores but no tissue")

    @property
    def key(self) -> tuple[int, int]:
        return (self.grid_x, self.grid_y)


@dataclass(frozen=True)
class SlideResult:
    slide_id: str
    predicted_label: SlideLabel
    n_mel: int
    n_nev: int
    beta: float
    roi_patches: tuple[tuple[int, int], ...]
    tie_flag: bool = False
    iou: Optional[float] = None
    n_other: int = 0
    true_label: Optional[SlideLabel] = None

    @property
    def k(self) -> int:
        return len(self.roi_patches)

    def to_dict(self) -> dict:
        out = {
            "slide_id": self.slide_id,
            "predicted_label": self.predicted_label.value,
            "n_mel": self.n_mel,
            "n_nev": self.n_nev,
            "n_other": self.n_other,
            "beta": self.beta,
            "k": self.k,
            "roi_patches": [list(p) for p in self.roi_patches],
            "tie_flag": self.tie_flag,
        }
        if self.iou is not None:
            out["iou"] = self.iou
        if self.true_label is not None:
            out["true_label"] = self.true_label.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SlideResult":
        return cls(
            slide_id=d["slide_id"],
            predicted_label=SlideLabel(d["predicted_label"]),
            n_mel=int(d["n_mel"]),
            n_nev=int(d["n_nev"]),
            n_other=int(d.get("n_other", 0)),
            beta=float(d["beta"]),
            roi_patches=tuple((int(x), int(y)) for x, y in d["roi_patches"]),
            tie_flag=bool(d["tie_flag"]),
            iou=d.get("iou"),
            true_label=SlideLabel(d["true_label"]) if d.get("true_label") else None,
        )


def build_grid(raster: SlideRaster, patch_size: int = PATCH_SIZE) -> PatchGrid:
    cols = raster.width // patch_size
    rows = raster.height // patch_size
    if cols < 1 or rows < 1:
        raise InvalidSlide(
            f"{raster.slide_id}: {raster.width}x{raster.height} is smaller than one "
            f"{patch_size}x{patch_size} patch"
        )
    return PatchGrid(raster.slide_id, cols=cols, rows=rows, patch_size=patch_size)


def patch_pixels(raster: SlideRaster, grid_x: int, grid_y: int,
                 patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Read-only view of one patch."""
    cols = raster.width // patch_size
    rows = raster.height // patch_size
    if not (0 <= grid_x < cols and 0 <= grid_y < rows):
        raise IndexError(f"patch ({grid_x}, {grid_y}) outside {cols}x{rows} grid")
    y0, x0 = grid_y * patch_size, grid_x * patch_size
    return raster.pixels[y0:y0 + patch_size, x0:x0 + patch_size]


def patch_stack(raster: SlideRaster, positions: Sequence[tuple[int, int]],
                patch_size: int = PATCH_SIZE) -> np.ndarray:
    """``(n, 256, 256, 3)`` copy of the patches at ``positions``."""
    out = np.empty((len(positions), patch_size, patch_size, 3), dtype=np.uint8)
    for i, (gx, gy) in enumerate(positions):
        out[i] = patch_pixels(raster, gx, gy, patch_size)
    return out


def check_same_slide(a, b) -> None:
    if a.slide_id != b.slide_id:
        raise IdentityError(f"slide mismatch: {a.slide_id!r} vs {b.slide_id!r}")


# -- raster and manifest I/O -------------------------------------------------

def load_raster(path, slide_id: Optional[str] = None,
                label: Optional[SlideLabel] = None) -> SlideRaster:
    """Load a PNG or PPM slide into a :class:`SlideRaster`."""
    path = Path(path)
    with Image.open(path) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    return SlideRaster(slide_id or path.stem, px, true_label=label)


def save_png(path, array: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG", compress_level=1)


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    path: Path
    label: Optional[SlideLabel] = None
    annotation: Optional[Path] = None
    annotation_full: Optional[Path] = None
    mask: Optional[Path] = None

    def to_dict(self, root: Path) -> dict:
        d = {"slide_id": self.slide_id, "path": _rel(self.path, root)}
        if self.label is not None:
            d["label"] = self.label.value
        for key in ("annotation", "annotation_full", "mask"):
            val = getattr(self, key)
            if val is not None:
                d[key] = _rel(val, root)
        return d


def _rel(p: Path, root: Path) -> str:
    try:
        return Path(p).relative_to(root).as_posix()
    except ValueError:
        return str(p)


def read_manifest(path) -> list[ManifestEntry]:
    """Read a cohort manifest; relative paths resolve against the manifest directory.

    Accepts either a bare list of entries or ``{"slides": [...]}``.
    """
    path = Path(path)
    root = path.parent
    data = json.loads(path.read_text())
    entries = data["slides"] if isinstance(data, dict) else data
    out = []
    for e in entries:
        def resolve(key):
            v = e.get(key)
            return (root / v) if v else None
        out.append(ManifestEntry(
            slide_id=str(e["slide_id"]),
            path=root / e["path"],
            label=SlideLabel(e["label"]) if e.get("label") else None,
            annotation=resolve("annotation"),
            annotation_full=resolve("annotation_full"),
            mask=resolve("mask"),
        ))
    ids = [m.slide_id for m in out]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate slide_id in manifest")
    return sorted(out, key=lambda m: m.slide_id)


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    root = path.parent
    doc = {"slides": [e.to_dict(root) for e in sorted(entries, key=lambda m: m.slide_id)]}
    path.write_text(json.dumps(doc, indent=2) + "\n")


# -- patch CSV ---------------------------------------------------------------

def _fmt_float(v: float) -> str:
    return repr(float(v))


def records_to_csv(rows: Iterable[tuple[str, PatchRecord]]) -> str:
    """Serialize ``(slide_id, record)`` pairs to the patch CSV schema."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PATCH_CSV_FIELDS)
    for slide_id, r in rows:
        s = r.scores.as_tuple() if r.scores is not None else ("", "", "")
        w.writerow([
            slide_id, r.grid_x, r.grid_y, int(r.tissue),
            r.label.value if r.label is not None else "",
            *(_fmt_float(v) if v != "" else "" for v in s),
            int(r.in_annotation),
        ])
    return buf.getvalue()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def records_from_csv(text: str) -> dict[str, list[PatchRecord]]:
    """Parse the patch CSV schema into records grouped by slide id."""
    reader = csv.DictReader(io.StringIO(text))
    missing = {"slide_id", "grid_x", "grid_y"} - set(reader.fieldnames or ())
    if missing:
        raise ValidationError(f"patch CSV lacks columns {sorted(missing)}")
    out: dict[str, list[PatchRecord]] = {}
    for row in reader:
        scores = None
        if row.get("s_mel"):
            scores = ScoreTriplet(float(row["s_mel"]), float(row["s_nev"]), float(row["s_other"]))
        label = row.get("label") or None
        out.setdefault(row["slide_id"], []).append(PatchRecord(
            grid_x=int(row["grid_x"]),
            grid_y=int(row["grid_y"]),
            tissue=_parse_bool(row.get("tissue", "1")),
            label=PatchClass(label) if label else None,
            scores=scores,
            in_annotation=_parse_bool(row.get("in_annotation", "0")),
        ))
    return out


def with_scores(records: Sequence[PatchRecord], scores: dict[tuple[int, int], ScoreTriplet]
                ) -> list[PatchRecord]:
    return [replace(r, scores=scores.get(r.key, r.scores)) for r in records]
