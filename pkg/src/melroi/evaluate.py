"""Patch/slide accuracy, patch-grid IoU, and the training-fraction robustness sweep."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .aggregate import detect
from .annotations import annotated_ratio
from .core import PatchGrid, PatchRecord, SlideLabel, SlideResult
from .patching import CohortSlide, dataset_from_slides, label_patches, stratified_split
from .scorer import SoftmaxRegression, to_triplet

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8)


def patch_iou(annotated, predicted) -> float:
    """|A & B| / |A | B| over patch keys; 1 when both are empty."""
    a, b = set(annotated), set(predicted)
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def confusion_matrix(results: Sequence[SlideResult]) -> np.ndarray:
    """2x2 counts, rows = true label, columns = predicted, order (melanoma, nevus)."""
    order = list(SlideLabel)
    cm = np.zeros((2, 2), dtype=np.int64)
    for r in results:
        if r.true_label is None:
            continue
        cm[order.index(r.true_label), order.index(r.predicted_label)] += 1
    return cm


class FeatureBank:
    """Per-slide patch descriptors keyed by ``(grid_x, grid_y)``."""

    def __init__(self, banks: Mapping[str, tuple[np.ndarray, np.ndarray]]):
        self._pos = {}
        self._feats = {}
        for sid, (positions, feats) in banks.items():
            self._pos[sid] = {(int(x), int(y)): i for i, (x, y) in enumerate(positions)}
            self._feats[sid] = np.asarray(feats, dtype=np.float64)

    def __contains__(self, slide_id):
        return slide_id in self._feats

    def rows(self, slide_id: str, keys: Sequence[tuple[int, int]]) -> np.ndarray:
        idx = [self._pos[slide_id][k] for k in keys]
        return self._feats[slide_id][idx]

    def matrix(self, entries) -> np.ndarray:
        """Stack rows for ``(slide_id, grid_x, grid_y, ...)`` entries in order."""
        return np.vstack([self._feats[e[0]][self._pos[e[0]][(e[1], e[2])]][None] for e in entries])


@dataclass(frozen=True)
class EvalSlide:
    """A test slide: records carry tissue and ground-truth annotation flags."""

    slide_id: str
    true_label: Optional[SlideLabel]
    grid: PatchGrid
    records: tuple[PatchRecord, ...]
    has_annotation: bool = True


@dataclass
class EvalReport:
    patch_accuracy: float
    slide_accuracy: float
    mean_iou: float
    per_slide: list[SlideResult]
    split_fraction: Optional[float] = None
    seed: Optional[int] = None
    n_labeled_patches: int = 0
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "patch_accuracy": self.patch_accuracy,
            "slide_accuracy": self.slide_accuracy,
            "mean_iou": self.mean_iou,
            "n_slides": len(self.per_slide),
            "n_labeled_patches": self.n_labeled_patches,
            "split_fraction": self.split_fraction,
            "seed": self.seed,
            "confusion_matrix": {
                "labels": [l.value for l in SlideLabel],
                "counts": confusion_matrix(self.per_slide).tolist(),
            },
            "skipped": list(self.skipped),
            "per_slide": [r.to_dict() for r in self.per_slide],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [
            ("Patch classification accuracy", self.patch_accuracy),
            ("Slide classification accuracy", self.slide_accuracy),
            ("IoU", self.mean_iou),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Evaluation metric'.ljust(width)}   Scorer", "-" * (width + 9)]
        lines += [f"{name.ljust(width)}  {_fmt(v)}" for name, v in rows]
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


ScoreFn = Callable[[str, Sequence[tuple[int, int]]], np.ndarray]


def scorer_from_bank(estimator, bank: FeatureBank) -> ScoreFn:
    """Wrap anything with ``predict_proba`` into a per-slide scoring function."""
    def fn(slide_id, keys):
        if not keys:
            return np.zeros((0, 3))
        return estimator.predict_proba(bank.rows(slide_id, keys))
    return fn


def evaluate_cohort(slides: Sequence[EvalSlide], scorer: Optional[ScoreFn] = None,
                    fixed_beta: Optional[float] = None, split_fraction: Optional[float] = None,
                    seed: Optional[int] = None) -> EvalReport:
    """Score, classify and compare every test slide against its ground truth.

    ``scorer(slide_id, keys) -> (n, 3)`` supplies probabilities for the tissue
    patches at ``keys``; without it the records' own scores are used. beta comes
    from each slide's annotation unless ``fixed_beta`` is given or the slide has
    no annotation.
    """
    results: list[SlideResult] = []
    correct_patches = total_patches = 0
    skipped = []
    for s in sorted(slides, key=lambda s: s.slide_id):
        if s.true_label is None and not s.has_annotation:
            log.warning("slide %s has neither label nor annotation; skipped", s.slide_id)
            skipped.append(s.slide_id)
            continue
        records = list(s.records)
        if scorer is not None:
            keys = [r.key for r in records if r.tissue]
            probs = scorer(s.slide_id, keys)
            by_key = {k: to_triplet(p) for k, p in zip(keys, probs)}
            records = [replace(r, scores=by_key.get(r.key)) for r in records]
        if not any(r.tissue and r.scores is not None for r in records):
            log.warning("slide %s has no scored tissue patches; skipped", s.slide_id)
            skipped.append(s.slide_id)
            continue

        if s.has_annotation and fixed_beta is None:
            beta = annotated_ratio(records)
        else:
            beta = 0.2 if fixed_beta is None else fixed_beta
        res = detect(s.slide_id, records, beta, true_label=s.true_label)
        if s.has_annotation:
            truth = [r.key for r in records if r.tissue and r.in_annotation]
            res = replace(res, iou=patch_iou(truth, res.roi_patches))
        results.append(res)

        if s.true_label is not None and s.has_annotation:
            for r in label_patches(s.grid, records, s.true_label):
                if r.label is not None and r.scores is not None:
                    total_patches += 1
                    correct_patches += r.scores.argmax is r.label

    labeled = [r for r in results if r.true_label is not None]
    ious = [r.iou for r in results if r.iou is not None]
    return EvalReport(
        patch_accuracy=correct_patches / total_patches if total_patches else float("nan"),
        slide_accuracy=(sum(r.predicted_label is r.true_label for r in labeled) / len(labeled)
                        if labeled else float("nan")),
        mean_iou=float(np.mean(ious)) if ious else float("nan"),
        per_slide=results,
        split_fraction=split_fraction,
        seed=seed,
        n_labeled_patches=total_patches,
        skipped=skipped,
    )


# -- robustness sweep ----------------------------------------------------------

METRICS = ("patch_accuracy", "slide_accuracy", "mean_iou")


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci_low: float
    ci_high: float
    values: tuple[float, ...]

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "MetricSummary":
        v = np.asarray(values, dtype=np.float64)
        mean = float(v.mean())
        half = 1.96 * float(v.std(ddof=1)) / math.sqrt(len(v)) if len(v) > 1 else 0.0
        return cls(mean, mean - half, mean + half, tuple(float(x) for x in v))


@dataclass
class RobustnessSummary:
    rows: dict[float, dict[str, MetricSummary]]
    n_repeats: int
    base_seed: int

    def to_dict(self) -> dict:
        return {
            "n_repeats": self.n_repeats,
            "base_seed": self.base_seed,
            "ci_method": "normal approximation: mean +/- 1.96 * sd / sqrt(n_repeats)",
            "rows": [
                {"fraction": f, **{m: vars(s) | {"values": list(s.values)}
                                    for m, s in row.items()}}
                for f, row in sorted(self.rows.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        labels = {"patch_accuracy": "Patch classification accuracy",
                  "slide_accuracy": "Slide classification accuracy",
                  "mean_iou": "Intersection over Union"}
        width = max(len(v) for v in labels.values())
        lines = []
        for f, row in sorted(self.rows.items()):
            lines.append(f"{int(round(f * 100))}% split ({self.n_repeats} repeats)")
            lines.append(f"{''.ljust(width)}  {'Mean':>7}  95% CI")
            for m in METRICS:
                s = row[m]
                lines.append(f"{labels[m].ljust(width)}  {_fmt(s.mean):>7}  "
                             f"[{_fmt(s.ci_low)}, {_fmt(s.ci_high)}]")
            lines.append("")
        return "\n".join(lines)


def repeat_seed(base_seed: int, fraction: float, repeat: int) -> int:
    key = f"{base_seed}:{fraction!r}:{repeat}".encode()
    return zlib.crc32(key)


def robustness_sweep(train_slides: Sequence[CohortSlide], test_slides: Sequence[EvalSlide],
                     bank: FeatureBank, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     n_repeats: int = 3, base_seed: int = 0,
                     hyper: Optional[dict] = None) -> RobustnessSummary:
    """Retrain on stratified subsamples of the training slides and evaluate on a fixed test set."""
    if n_repeats < 2:
        raise ValueError("n_repeats must be at least 2")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    hyper = dict(hyper or {})
    by_id = {s.slide_id: s for s in train_slides}
    rows = {}
    for f in fractions:
        per_metric = {m: [] for m in METRICS}
        for rep in range(n_repeats):
            seed = repeat_seed(base_seed, f, rep)
            keep, _ = stratified_split(((s.slide_id, s.label) for s in train_slides), f, seed,
                                       allow_full=True)
            ds = dataset_from_slides([by_id[i] for i in keep], seed)
            est = SoftmaxRegression(**{**hyper, "seed": seed})
            est.fit(bank.matrix(ds.entries), [e[3] for e in ds.entries])
            report = evaluate_cohort(test_slides, scorer_from_bank(est, bank),
                                     split_fraction=f, seed=seed)
            for m in METRICS:
                per_metric[m].append(getattr(report, m))
        rows[float(f)] = {m: MetricSummary.from_values(v) for m, v in per_metric.items()}
    return RobustnessSummary(rows, n_repeats, base_seed)
