"""Patch labeling rules and slide-level train/test splitting."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_cdt

from .core import PatchClass, PatchGrid, PatchRecord, SlideLabel, records_to_csv
from .exceptions import StratificationError, ValidationError

OTHER_BUFFER = 2
OTHER_CAP_RATIO = 2.0


def _grid_array(grid: PatchGrid, records: Sequence[PatchRecord], attr: str) -> np.ndarray:
    out = np.zeros((grid.rows, grid.cols), dtype=bool)
    for r in records:
        out[r.grid_y, r.grid_x] = getattr(r, attr)
    return out


def chebyshev_to_annotation(grid: PatchGrid, records: Sequence[PatchRecord]) -> np.ndarray:
    """Chessboard distance (grid units) from each patch to the nearest in-annotation patch.

    Returns ``inf`` everywhere when nothing is annotated.
    """
    annotated = _grid_array(grid, records, "in_annotation")
    if not annotated.any():
        return np.full(annotated.shape, np.inf)
    return distance_transform_cdt(~annotated, metric="chessboard").astype(float)


def label_patches(grid: PatchGrid, records: Sequence[PatchRecord], slide_label: SlideLabel,
                  buffer: int = OTHER_BUFFER) -> list[PatchRecord]:
    """Assign patch labels from the slide label and annotation membership.

    Tissue inside an annotation takes the slide's class. Tissue outside becomes
    Other only when at least ``buffer`` patches (Chebyshev) from every
    annotated patch; nearer tissue and all background stay unlabeled.
    """
    dist = chebyshev_to_annotation(grid, records)
    out = []
    for r in records:
        if not r.tissue:
            label = None
        elif r.in_annotation:
            label = slide_label.patch_class
        elif dist[r.grid_y, r.grid_x] >= buffer:
            label = PatchClass.OTHER
        else:
            label = None
        out.append(replace(r, label=label))
    return out


def cap_other(records: Sequence[PatchRecord], rng: np.random.Generator,
              ratio: float = OTHER_CAP_RATIO) -> list[PatchRecord]:
    """Keep at most ``ratio`` x (# melanoma/nevus patches) Other labels, chosen uniformly."""
    tumour = sum(1 for r in records if r.label in (PatchClass.MELANOMA, PatchClass.NEVUS))
    others = [i for i, r in enumerate(records) if r.label is PatchClass.OTHER]
    cap = int(math.floor(ratio * tumour))
    if len(others) <= cap:
        return list(records)
    keep = set(rng.choice(len(others), size=cap, replace=False).tolist())
    dropped = {others[j] for j in range(len(others)) if j not in keep}
    return [replace(r, label=None) if i in dropped else r for i, r in enumerate(records)]


@dataclass(frozen=True)
class PatchDataset:
    entries: tuple[tuple[str, int, int, PatchClass], ...]
    provenance: str = "train"

    def __post_init__(self):
        keys = [e[:3] for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate patch in dataset")

    @property
    def class_counts(self) -> dict[str, int]:
        c = Counter(e[3] for e in self.entries)
        return {cls.value: c.get(cls, 0) for cls in PatchClass}

    @property
    def slide_ids(self) -> list[str]:
        return sorted({e[0] for e in self.entries})

    def __len__(self):
        return len(self.entries)

    def to_csv(self) -> str:
        rows = ((sid, PatchRecord(gx, gy, True, label=lab, in_annotation=lab is not PatchClass.OTHER))
                for sid, gx, gy, lab in self.entries)
        return records_to_csv(rows)

    def summary(self, n_slides: int, seed: int, fraction: float) -> str:
        return json.dumps({
            "n_slides": n_slides,
            "n_patches": len(self),
            "class_counts": self.class_counts,
            "seed": seed,
            "fraction": fraction,
            "provenance": self.provenance,
        }, indent=2, sort_keys=True) + "\n"


def stratified_split(items: Iterable[tuple[str, SlideLabel]], fraction: float, seed: int,
                     allow_full: bool = False) -> tuple[list[str], list[str]]:
    """Split slide ids per label class, keeping ``round(fraction * n_class)`` (halves up) of each.

    Ids are sorted before the seeded shuffle, so input order never matters.
    Raises :class:`StratificationError` when a class would be missing from
    either side (or from the kept side when ``allow_full``).
    """
    if not (0.0 < fraction < 1.0 or (allow_full and fraction == 1.0)):
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    by_label: dict[SlideLabel, list[str]] = {}
    for sid, label in items:
        if label is None:
            raise StratificationError(f"slide {sid!r} has no label")
        by_label.setdefault(SlideLabel(label), []).append(sid)
    if not by_label:
        raise StratificationError("empty cohort")
    keep, rest = [], []
    for i, label in enumerate(SlideLabel):
        ids = sorted(by_label.get(label, []))
        if not ids:
            continue
        n_keep = int(math.floor(fraction * len(ids) + 0.5 + 1e-9))
        too_many = n_keep >= len(ids) and not allow_full
        if n_keep == 0 or too_many:
            raise StratificationError(
                f"fraction {fraction} leaves class {label.value!r} ({len(ids)} slides) "
                "absent from one side of the split")
        order = np.random.default_rng([seed, i]).permutation(len(ids))
        keep.extend(ids[j] for j in order[:n_keep])
        rest.extend(ids[j] for j in order[n_keep:])
    return sorted(keep), sorted(rest)


@dataclass(frozen=True)
class CohortSlide:
    """A slide whose patch records already carry tissue and annotation flags."""

    slide_id: str
    label: SlideLabel
    grid: PatchGrid
    records: tuple[PatchRecord, ...]


def slide_training_labels(slide: CohortSlide, seed: int,
                          other_cap: Optional[float] = OTHER_CAP_RATIO) -> list[PatchRecord]:
    labeled = label_patches(slide.grid, slide.records, slide.label)
    if other_cap is None:
        return labeled
    rng = np.random.default_rng([seed, _stable_hash(slide.slide_id)])
    return cap_other(labeled, rng, other_cap)


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def dataset_from_slides(slides: Sequence[CohortSlide], seed: int, provenance: str = "train",
                        other_cap: Optional[float] = OTHER_CAP_RATIO) -> PatchDataset:
    entries = []
    for s in sorted(slides, key=lambda s: s.slide_id):
        for r in slide_training_labels(s, seed, other_cap):
            if r.label is not None:
                entries.append((s.slide_id, r.grid_x, r.grid_y, r.label))
    return PatchDataset(tuple(entries), provenance)


def build_dataset(cohort: Sequence[CohortSlide], fraction: float, seed: int,
                  other_cap: Optional[float] = OTHER_CAP_RATIO
                  ) -> tuple[PatchDataset, list[str]]:
    """Stratified slide-level split; returns the training patch dataset and test slide ids."""
    if not cohort:
        raise ValidationError("empty cohort")
    train_ids, test_ids = stratified_split(((s.slide_id, s.label) for s in cohort), fraction, seed)
    train = set(train_ids)
    dataset = dataset_from_slides([s for s in cohort if s.slide_id in train], seed,
                                  "train", other_cap)
    return dataset, test_ids
