"""Slide-level majority vote and top-k ROI selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import PatchClass, PatchRecord, SlideLabel, SlideResult
from .exceptions import EmptySlideError, ValidationError


@dataclass(frozen=True)
class VoteSummary:
    n_mel: int
    n_nev: int
    n_other: int
    tie_flag: bool


def _scored(patches: Sequence[PatchRecord]) -> list[PatchRecord]:
    return [p for p in patches if p.tissue and p.scores is not None]


def classify_slide(patches: Sequence[PatchRecord]) -> tuple[SlideLabel, VoteSummary]:
    """Majority vote over per-patch argmax classes, ignoring Other.

    A tie (including no melanoma or nevus votes at all) resolves to melanoma
    with ``tie_flag`` set.
    """
    scored = _scored(patches)
    if not scored:
        raise EmptySlideError("no scored tissue patches to vote with")
    counts = {c: 0 for c in PatchClass}
    for p in scored:
        counts[p.scores.argmax] += 1
    n_mel, n_nev = counts[PatchClass.MELANOMA], counts[PatchClass.NEVUS]
    summary = VoteSummary(n_mel, n_nev, counts[PatchClass.OTHER], tie_flag=n_mel == n_nev)
    label = SlideLabel.NEVUS if n_nev > n_mel else SlideLabel.MELANOMA
    return label, summary


def rank_patches(patches: Sequence[PatchRecord], slide_label: SlideLabel) -> list[PatchRecord]:
    """Scored tissue patches by descending score of the slide's class; ties by (grid_y, grid_x)."""
    cls = slide_label.patch_class
    return sorted(_scored(patches),
                  key=lambda p: (-p.scores.for_class(cls), p.grid_y, p.grid_x))


def roi_size(n: int, beta: float) -> int:
    """round(n * beta), halves away from zero."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta must lie in [0, 1], got {beta}")
    # the epsilon absorbs representation error when n*beta is a half-integer
    return min(n, int(math.floor(n * beta + 0.5 + 1e-9)))


def select_roi(ranked: Sequence[PatchRecord], beta: float) -> list[PatchRecord]:
    return list(ranked[:roi_size(len(ranked), beta)])


def detect(slide_id: str, patches: Sequence[PatchRecord], beta: float,
           true_label: Optional[SlideLabel] = None) -> SlideResult:
    """Classify one slide and pick its top ``round(n * beta)`` patches as ROI."""
    label, votes = classify_slide(patches)
    roi = select_roi(rank_patches(patches, label), beta)
    return SlideResult(
        slide_id=slide_id,
        predicted_label=label,
        n_mel=votes.n_mel,
        n_nev=votes.n_nev,
        n_other=votes.n_other,
        beta=beta,
        roi_patches=tuple(p.key for p in roi),
        tie_flag=votes.tie_flag,
        true_label=true_label,
    )
