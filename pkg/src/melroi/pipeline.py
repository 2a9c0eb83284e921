"""Stage functions behind the CLI; every stage reads and writes plain files under one output dir.

Artifact layout (relative to the output directory)::

    cohort/                   synthetic slides, XML, masks, manifest.json   (synth)
    split.json                stratified train/test slide ids               (extract)
    patches/slides.json       per-slide grid, label, role, annotation flag  (extract)
    patches/records.csv       tissue and in-annotation flags per patch      (extract)
    features/<slide_id>.npy   (n_tissue, 40) descriptors, row-major order   (extract)
    stains.json               per-slide Macenko profile                     (extract)
    dataset/train_patches.csv labeled training patches                      (extract)
    dataset/summary.json
    model.json                classifier weights                            (train)
    scores.csv                records.csv plus class scores                 (score)
    results/slide_results.json                                              (classify)
    eval/report.json, eval/table.txt                                        (evaluate)
    sweep/summary.json, sweep/table.txt                                     (sweep)
    viz/<slide_id>_<mode>.png, viz/<slide_id>_reachability.csv              (visualize)
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .aggregate import detect
from .annotations import annotated_ratio, parse_annotation_xml, patch_membership
from .core import (ManifestEntry, PatchGrid, PatchRecord, SlideLabel, SlideResult, build_grid,
                   load_raster, patch_stack, read_manifest, records_from_csv, records_to_csv,
                   save_png)
from .evaluate import (DEFAULT_FRACTIONS, EvalSlide, FeatureBank, evaluate_cohort,
                       robustness_sweep)
from .exceptions import (ConfigError, DegenerateStains, InsufficientTissue, MissingArtifact,
                         SingleClusterFallback, ValidationError)
from .features import extract_features
from .optics import optics_order
from .patching import CohortSlide, dataset_from_slides, stratified_split
from .preprocess import (DEFAULT_REFERENCE, AugmentationConfig, StainProfile, TissueThresholds,
                         detect_tissue, estimate_stains, normalize_patch, random_crop_flip)
from .scorer import (ClassifierModel, SoftmaxRegression, ingest_external_scores, score_matrix,
                     to_triplet)
from .synthgen import CohortSpec, write_cohort
from .viz import RenderMode, RenderSpec, render

log = logging.getLogger(__name__)

WORKERS_ENV = "MELROI_WORKERS"
STAIN_SAMPLE_PATCHES = 100
SCORER_KEYS = ("epochs", "learning_rate", "batch_size", "tol", "n_iter_no_change")


def derive_seed(seed: int, stage: str) -> int:
    return zlib.crc32(f"{seed}:{stage}".encode())


def _section(d: dict, name: str, allowed: Sequence[str]) -> dict:
    sec = d.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be an object")
    extra = set(sec) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
    return sec


@dataclass(frozen=True)
class PipelineConfig:
    output: Path
    seed: int
    manifest: Optional[Path] = None
    synth: Optional[CohortSpec] = None
    tissue: TissueThresholds = TissueThresholds()
    reference: StainProfile = DEFAULT_REFERENCE
    stain_pixel_stride: int = 4
    augmentation: AugmentationConfig = AugmentationConfig()
    train_augment_draws: int = 0
    scorer: dict = field(default_factory=dict)
    external_scores: Optional[Path] = None
    fallback_beta: float = 0.2
    fixed_beta: Optional[float] = None
    split_fraction: float = 0.8
    sweep_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    sweep_repeats: int = 3
    render: RenderSpec = RenderSpec()
    render_modes: tuple[RenderMode, ...] = tuple(RenderMode)

    @property
    def manifest_path(self) -> Path:
        return self.manifest if self.manifest is not None else self.output / "cohort" / "manifest.json"

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path("."), output: Optional[Path] = None,
                  seed: Optional[int] = None) -> "PipelineConfig":
        """Validate a config mapping; relative paths resolve against ``base``."""
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        top = {"seed", "output", "cohort", "preprocess", "augmentation", "scorer",
               "aggregation", "evaluation", "render"}
        extra = set(d) - top
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")

        seed = d.get("seed") if seed is None else seed
        if seed is None or isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("a non-negative integer 'seed' is required")
        out = output if output is not None else d.get("output")
        if not out:
            raise ConfigError("an output directory is required ('output' or --output)")
        out = Path(base, out) if output is None else Path(out)

        def path(v):
            return None if v in (None, "") else Path(base, v)

        cohort = _section(d, "cohort", ("manifest", "synth"))
        manifest = path(cohort.get("manifest"))
        if manifest is not None and not manifest.is_file():
            raise ConfigError(f"cohort manifest not found: {manifest}")
        synth = None
        if cohort.get("synth") is not None:
            spec = dict(cohort["synth"])
            spec.setdefault("seed", derive_seed(seed, "synth"))
            try:
                synth = CohortSpec(**spec)
            except TypeError as exc:
                raise ConfigError(f"cohort.synth: {exc}") from None

        pre = _section(d, "preprocess", ("tissue", "reference_stains", "stain_pixel_stride"))
        try:
            tissue = TissueThresholds(**(pre.get("tissue") or {}))
        except TypeError as exc:
            raise ConfigError(f"preprocess.tissue: {exc}") from None
        reference = DEFAULT_REFERENCE
        if pre.get("reference_stains") is not None:
            try:
                reference = StainProfile.from_dict(pre["reference_stains"])
            except (KeyError, ValidationError, ValueError) as exc:
                raise ConfigError(f"preprocess.reference_stains: {exc}") from None
        stride = pre.get("stain_pixel_stride", 4)
        if not isinstance(stride, int) or stride < 1:
            raise ConfigError("preprocess.stain_pixel_stride must be a positive integer")

        aug = dict(_section(d, "augmentation", ("crop_size", "hflip_probability", "channel_mean",
                                                "channel_std", "train_draws")))
        draws = aug.pop("train_draws", 0)
        if not isinstance(draws, int) or draws < 0:
            raise ConfigError("augmentation.train_draws must be a non-negative integer")
        for k in ("channel_mean", "channel_std"):
            if k in aug:
                aug[k] = tuple(aug[k])
        augmentation = AugmentationConfig(**aug, rng_seed=derive_seed(seed, "augment"))

        sc = dict(_section(d, "scorer", SCORER_KEYS + ("external_scores",)))
        external = path(sc.pop("external_scores", None))
        if external is not None and not external.is_file():
            raise ConfigError(f"external score file not found: {external}")
        _check_scorer(sc)

        agg = _section(d, "aggregation", ("fallback_beta", "fixed_beta"))
        fallback = agg.get("fallback_beta", 0.2)
        fixed = agg.get("fixed_beta")
        for name, v in (("fallback_beta", fallback), ("fixed_beta", fixed)):
            if v is not None and not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ConfigError(f"aggregation.{name} must lie in [0, 1]")

        ev = _section(d, "evaluation", ("split_fraction", "fractions", "repeats"))
        split = ev.get("split_fraction", 0.8)
        if not isinstance(split, (int, float)) or not 0.0 < split < 1.0:
            raise ConfigError("evaluation.split_fraction must lie in (0, 1)")
        fractions = tuple(float(f) for f in ev.get("fractions", DEFAULT_FRACTIONS))
        if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
            raise ConfigError("evaluation.fractions must be non-empty and lie in (0, 1]")
        repeats = ev.get("repeats", 3)
        if not isinstance(repeats, int) or repeats < 2:
            raise ConfigError("evaluation.repeats must be an integer >= 2")

        rd = dict(_section(d, "render", [f.name for f in fields(RenderSpec)] + ["modes"]))
        modes = rd.pop("modes", [m.value for m in RenderMode])
        try:
            modes = tuple(RenderMode(m) for m in modes)
            for k in ("overlay_mask_color", "boundary_color", "heatmap_low", "heatmap_high"):
                if k in rd:
                    rd[k] = tuple(rd[k])
            rspec = RenderSpec(**rd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"render: {exc}") from None

        return cls(output=out, seed=seed, manifest=manifest, synth=synth, tissue=tissue,
                   reference=reference, stain_pixel_stride=stride, augmentation=augmentation,
                   train_augment_draws=draws, scorer=sc, external_scores=external,
                   fallback_beta=float(fallback),
                   fixed_beta=None if fixed is None else float(fixed),
                   split_fraction=float(split), sweep_fractions=fractions,
                   sweep_repeats=repeats, render=rspec, render_modes=modes)

    @classmethod
    def load(cls, path, output=None, seed=None) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data, path.parent, None if output is None else Path(output), seed)


def _check_scorer(sc: dict) -> None:
    checks = {
        "epochs": lambda v: isinstance(v, int) and v >= 1,
        "learning_rate": lambda v: isinstance(v, (int, float)) and v > 0,
        "batch_size": lambda v: isinstance(v, int) and v >= 1,
        "tol": lambda v: isinstance(v, (int, float)) and v >= 0,
        "n_iter_no_change": lambda v: isinstance(v, int) and v >= 0,
    }
    for k, v in sc.items():
        if not checks[k](v):
            raise ConfigError(f"scorer.{k} out of range: {v!r}")


# -- helpers -------------------------------------------------------------------

def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def parallel_map(fn: Callable, jobs: Sequence, workers: int) -> list:
    """Order-preserving map, in-process for one worker."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run '{stage}' first")
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- synth ---------------------------------------------------------------------

def run_synth(cfg: PipelineConfig, workers: int = 1) -> Path:
    if cfg.synth is None:
        raise ConfigError("config has no cohort.synth section")
    return write_cohort(cfg.synth, cfg.output / "cohort", workers)


# -- extract -------------------------------------------------------------------

@dataclass
class SlideExtract:
    slide_id: str
    label: Optional[SlideLabel]
    role: str
    grid: PatchGrid
    records: list[PatchRecord]
    features: np.ndarray
    stains: StainProfile
    stain_fallback: bool
    has_annotation: bool


def _annotation_for(entry: ManifestEntry, role: str) -> Optional[Path]:
    if role == "test" and entry.annotation_full is not None:
        return entry.annotation_full
    return entry.annotation


def slide_stains(tissue_patches: np.ndarray, cfg: PipelineConfig, slide_id: str
                 ) -> tuple[StainProfile, bool]:
    """Slide-level Macenko profile; falls back to the reference when estimation fails."""
    if len(tissue_patches) > STAIN_SAMPLE_PATCHES:
        pick = np.unique(np.linspace(0, len(tissue_patches) - 1, STAIN_SAMPLE_PATCHES).round())
        tissue_patches = tissue_patches[pick.astype(int)]
    pixels = tissue_patches.reshape(-1, 3)[::cfg.stain_pixel_stride]
    try:
        return estimate_stains(pixels), False
    except (DegenerateStains, InsufficientTissue) as exc:
        log.warning("%s: stain estimation failed (%s); patches left unnormalized", slide_id, exc)
        return cfg.reference, True


def extract_slide(job) -> SlideExtract:
    entry, role, cfg = job
    raster = load_raster(entry.path, entry.slide_id, entry.label)
    grid = build_grid(raster)
    positions = list(grid.positions())
    patches = patch_stack(raster, positions)
    tissue = np.array([detect_tissue(p, cfg.tissue) for p in patches], dtype=bool)

    ann_path = _annotation_for(entry, role)
    if ann_path is not None:
        aset = parse_annotation_xml(Path(ann_path).read_text(),
                                    bounds=(raster.width, raster.height))
        member = patch_membership(grid, aset)
    else:
        member = np.zeros((grid.rows, grid.cols), dtype=bool)
    records = [PatchRecord(gx, gy, bool(t), in_annotation=bool(member[gy, gx]))
               for (gx, gy), t in zip(positions, tissue)]

    stains, fallback = cfg.reference, True
    feats = np.zeros((0, 40))
    if tissue.any():
        stains, fallback = slide_stains(patches[tissue], cfg, entry.slide_id)
        rows = []
        for p in patches[tissue]:
            q = p if fallback else normalize_patch(p, stains, cfg.reference)
            rows.append(extract_features(q, cfg.reference))
        feats = np.vstack(rows)
    return SlideExtract(entry.slide_id, entry.label, role, grid, records, feats, stains,
                        fallback, ann_path is not None)


def run_extract(cfg: PipelineConfig, workers: int = 1) -> None:
    manifest = _require(cfg.manifest_path, "synth")
    entries = read_manifest(manifest)
    split_seed = derive_seed(cfg.seed, "split")
    train_ids, test_ids = stratified_split(((e.slide_id, e.label) for e in entries),
                                           cfg.split_fraction, split_seed)
    test = set(test_ids)
    jobs = [(e, "test" if e.slide_id in test else "train", cfg) for e in entries]
    out = cfg.output
    slides = parallel_map(extract_slide, jobs, workers)

    (out / "features").mkdir(parents=True, exist_ok=True)
    for s in slides:
        with open(out / "features" / f"{s.slide_id}.npy", "wb") as fh:
            np.save(fh, s.features)
    _write(out / "split.json", _dump({"seed": split_seed, "fraction": cfg.split_fraction,
                                      "train": train_ids, "test": test_ids}))
    _write(out / "patches" / "slides.json", _dump({s.slide_id: {
        "label": s.label.value if s.label else None,
        "role": s.role,
        "cols": s.grid.cols,
        "rows": s.grid.rows,
        "has_annotation": s.has_annotation,
        "n_tissue": int(len(s.features)),
    } for s in slides}))
    _write(out / "patches" / "records.csv",
           records_to_csv((s.slide_id, r) for s in slides for r in s.records))
    _write(out / "stains.json", _dump({s.slide_id: {**s.stains.to_dict(),
                                                    "fallback": s.stain_fallback}
                                       for s in slides}))

    ds_seed = derive_seed(cfg.seed, "dataset")
    train_slides = [CohortSlide(s.slide_id, s.label, s.grid, tuple(s.records))
                    for s in slides if s.role == "train"]
    ds = dataset_from_slides(train_slides, ds_seed)
    _write(out / "dataset" / "train_patches.csv", ds.to_csv())
    _write(out / "dataset" / "summary.json",
           ds.summary(len(train_slides), ds_seed, cfg.split_fraction))


# -- shared loaders ------------------------------------------------------------

@dataclass
class Workspace:
    """Everything ``extract`` produced, reloaded from disk."""

    meta: dict
    records: dict[str, list[PatchRecord]]
    bank: FeatureBank
    grids: dict[str, PatchGrid]

    @classmethod
    def load(cls, out: Path) -> "Workspace":
        meta = json.loads(_require(out / "patches" / "slides.json", "extract").read_text())
        records = records_from_csv(_require(out / "patches" / "records.csv", "extract").read_text())
        banks = {}
        grids = {}
        for sid, m in meta.items():
            feats = np.load(_require(out / "features" / f"{sid}.npy", "extract"))
            keys = [r.key for r in records.get(sid, []) if r.tissue]
            if len(keys) != len(feats):
                raise ValidationError(f"{sid}: {len(feats)} feature rows for {len(keys)} tissue patches")
            banks[sid] = (keys, feats)
            grids[sid] = PatchGrid(sid, m["cols"], m["rows"])
        return cls(meta, records, FeatureBank(banks), grids)

    def ids(self, role: str) -> list[str]:
        return sorted(s for s, m in self.meta.items() if m["role"] == role)

    def label(self, sid: str) -> Optional[SlideLabel]:
        v = self.meta[sid]["label"]
        return SlideLabel(v) if v else None

    def cohort_slides(self) -> list[CohortSlide]:
        return [CohortSlide(s, self.label(s), self.grids[s], tuple(self.records[s]))
                for s in self.ids("train")]

    def eval_slides(self, records: Optional[dict] = None) -> list[EvalSlide]:
        records = records or self.records
        return [EvalSlide(s, self.label(s), self.grids[s], tuple(records[s]),
                          self.meta[s]["has_annotation"]) for s in self.ids("test")]


def _train_dataset_entries(out: Path):
    text = _require(out / "dataset" / "train_patches.csv", "extract").read_text()
    entries = []
    for sid, recs in records_from_csv(text).items():
        for r in recs:
            entries.append((sid, r.grid_x, r.grid_y, r.label))
    return sorted(entries, key=lambda e: (e[0], e[2], e[1]))


# -- train ---------------------------------------------------------------------

def _augmented_rows(job) -> np.ndarray:
    entry, stains, fallback, keys, cfg = job
    raster = load_raster(entry.path, entry.slide_id)
    rows = []
    for gx, gy in keys:
        p = patch_stack(raster, [(gx, gy)])[0]
        q = p if fallback else normalize_patch(p, stains, cfg.reference)
        for j in range(cfg.train_augment_draws):
            draw = zlib.crc32(f"{entry.slide_id}:{gx}:{gy}:{j}".encode())
            rows.append(extract_features(np.ascontiguousarray(
                random_crop_flip(q, cfg.augmentation, draw)), cfg.reference))
    return np.asarray(rows).reshape(-1, 40)


def run_train(cfg: PipelineConfig, workers: int = 1) -> ClassifierModel:
    out = cfg.output
    ws = Workspace.load(out)
    entries = _train_dataset_entries(out)
    X = ws.bank.matrix(entries)
    y = [e[3] for e in entries]
    if cfg.train_augment_draws:
        manifest = {e.slide_id: e for e in read_manifest(_require(cfg.manifest_path, "synth"))}
        stains = json.loads(_require(out / "stains.json", "extract").read_text())
        by_slide: dict[str, list] = {}
        for e in entries:
            by_slide.setdefault(e[0], []).append(e)
        jobs = [(manifest[sid], StainProfile.from_dict(stains[sid]), stains[sid]["fallback"],
                 [(e[1], e[2]) for e in es], cfg) for sid, es in sorted(by_slide.items())]
        extra = parallel_map(_augmented_rows, jobs, workers)
        X = np.vstack([X] + extra)
        for (_, es) in sorted(by_slide.items()):
            y += [e[3] for e in es for _ in range(cfg.train_augment_draws)]
    est = SoftmaxRegression(**cfg.scorer, seed=derive_seed(cfg.seed, "train")).fit(X, y)
    model = est.to_model()
    model.training_meta["n_samples"] = int(len(X))
    _write(out / "model.json", model.to_json())
    return model


# -- score / classify / evaluate -----------------------------------------------

def _score_with_model(ws: Workspace, model: ClassifierModel) -> dict[str, list[PatchRecord]]:
    out = {}
    for sid in sorted(ws.meta):
        recs = ws.records[sid]
        keys = [r.key for r in recs if r.tissue]
        probs = score_matrix(model, ws.bank.rows(sid, keys)) if keys else np.zeros((0, 3))
        by_key = {k: to_triplet(p) for k, p in zip(keys, probs)}
        out[sid] = [replace(r, scores=by_key.get(r.key)) for r in recs]
    return out


def run_score(cfg: PipelineConfig, workers: int = 1) -> None:
    out = cfg.output
    ws = Workspace.load(out)
    if cfg.external_scores is not None:
        ext = ingest_external_scores(cfg.external_scores.read_text(), ws.records)
        scored = {sid: [replace(r, scores=ext.get((sid, r.grid_x, r.grid_y)))
                        if r.tissue else r for r in recs]
                  for sid, recs in ws.records.items()}
    else:
        model = ClassifierModel.from_json(_require(out / "model.json", "train").read_text())
        scored = _score_with_model(ws, model)
    _write(out / "scores.csv",
           records_to_csv((sid, r) for sid in sorted(scored) for r in scored[sid]))


def _scored_records(cfg: PipelineConfig, ws: Workspace) -> dict[str, list[PatchRecord]]:
    """Scores from scores.csv, else computed in memory from model.json."""
    out = cfg.output
    if (out / "scores.csv").exists():
        return records_from_csv((out / "scores.csv").read_text())
    if (out / "model.json").exists():
        return _score_with_model(ws, ClassifierModel.from_json((out / "model.json").read_text()))
    raise MissingArtifact(f"neither {out / 'scores.csv'} nor {out / 'model.json'} exists; "
                          "run 'train' (and 'score') first")


def _beta(cfg: PipelineConfig, records, has_annotation: bool) -> float:
    if cfg.fixed_beta is not None:
        return cfg.fixed_beta
    if has_annotation:
        return annotated_ratio(records)
    return cfg.fallback_beta


def run_classify(cfg: PipelineConfig, workers: int = 1) -> list[SlideResult]:
    ws = Workspace.load(cfg.output)
    scored = _scored_records(cfg, ws)
    results = []
    for s in ws.eval_slides(scored):
        if not any(r.tissue for r in s.records):
            log.warning("%s has no tissue; skipped", s.slide_id)
            continue
        results.append(detect(s.slide_id, s.records, _beta(cfg, s.records, s.has_annotation),
                              true_label=s.true_label))
    _write(cfg.output / "results" / "slide_results.json",
           _dump({"slides": [r.to_dict() for r in results]}))
    return results


def run_evaluate(cfg: PipelineConfig, workers: int = 1):
    ws = Workspace.load(cfg.output)
    scored = _scored_records(cfg, ws)
    split = json.loads(_require(cfg.output / "split.json", "extract").read_text())
    report = evaluate_cohort(ws.eval_slides(scored), fixed_beta=cfg.fixed_beta,
                             split_fraction=split["fraction"], seed=split["seed"])
    _write(cfg.output / "eval" / "report.json", report.to_json())
    _write(cfg.output / "eval" / "table.txt", report.table())
    return report


def run_sweep(cfg: PipelineConfig, workers: int = 1):
    ws = Workspace.load(cfg.output)
    summary = robustness_sweep(ws.cohort_slides(), ws.eval_slides(), ws.bank,
                               cfg.sweep_fractions, cfg.sweep_repeats,
                               derive_seed(cfg.seed, "sweep"), cfg.scorer)
    _write(cfg.output / "sweep" / "summary.json", summary.to_json())
    _write(cfg.output / "sweep" / "table.txt", summary.table())
    return summary


# -- visualize -----------------------------------------------------------------

def _render_slide(job) -> list[str]:
    entry, result, records, cfg = job
    raster = load_raster(entry.path, entry.slide_id, entry.label)
    vdir = cfg.output / "viz"
    written = []
    for mode in cfg.render_modes:
        img = render(raster, result, records, replace(cfg.render, mode=mode))
        path = vdir / f"{entry.slide_id}_{mode.value}.png"
        save_png(path, img)
        written.append(path.name)
    pts = np.asarray(result.roi_patches, dtype=float).reshape(-1, 2)
    try:
        csv_text = optics_order(pts, cfg.render.min_pts, cfg.render.eps).to_csv()
    except SingleClusterFallback:
        csv_text = "order_index,point_id,reachability\n"
    path = vdir / f"{entry.slide_id}_reachability.csv"
    path.write_text(csv_text)
    written.append(path.name)
    return written


def run_visualize(cfg: PipelineConfig, workers: int = 1) -> list[str]:
    out = cfg.output
    results_doc = json.loads(_require(out / "results" / "slide_results.json", "classify").read_text())
    results = [SlideResult.from_dict(d) for d in results_doc["slides"]]
    ws = Workspace.load(out)
    scored = _scored_records(cfg, ws)
    manifest = {e.slide_id: e for e in read_manifest(_require(cfg.manifest_path, "synth"))}
    (out / "viz").mkdir(parents=True, exist_ok=True)
    jobs = [(manifest[r.slide_id], r, scored[r.slide_id], cfg)
            for r in sorted(results, key=lambda r: r.slide_id)]
    return [name for names in parallel_map(_render_slide, jobs, workers) for name in names]


STAGES: dict[str, Callable] = {
    "synth": run_synth,
    "extract": run_extract,
    "train": run_train,
    "score": run_score,
    "classify": run_classify,
    "evaluate": run_evaluate,
    "sweep": run_sweep,
    "visualize": run_visualize,
}
