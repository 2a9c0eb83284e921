"""Patch-based ROI detection and slide classification for melanocytic whole-slide images."""

from .aggregate import VoteSummary, classify_slide, detect, rank_patches, roi_size, select_roi
from .annotations import (AnnotationRegion, AnnotationSet, annotated_ratio, parse_annotation_xml,
                          patch_membership, serialize_annotation_xml)
from .core import (CLASS_ORDER, PATCH_SIZE, ManifestEntry, PatchClass, PatchGrid, PatchRecord,
                   ScoreTriplet, SlideLabel, SlideRaster, SlideResult, build_grid, load_raster,
                   patch_pixels, read_manifest, records_from_csv, records_to_csv, write_manifest)
from .evaluate import (EvalReport, EvalSlide, FeatureBank, MetricSummary, RobustnessSummary,
                       confusion_matrix, evaluate_cohort, patch_iou, robustness_sweep)
from .exceptions import *  # noqa: F401,F403
from .features import FEATURE_NAMES, PatchFeatureExtractor, extract_features
from .optics import OPTICSClustering, ReachabilityPlot, extract_clusters, largest_roi_cluster, optics_order
from .patching import (CohortSlide, PatchDataset, build_dataset, cap_other, label_patches,
                       stratified_split)
from .pipeline import PipelineConfig
from .preprocess import (DEFAULT_REFERENCE, AugmentationConfig, MacenkoNormalizer, PatchAugmenter,
                         StainProfile, TissueThresholds, augment, detect_tissue, estimate_stains,
                         normalize_patch)
from .scorer import ClassifierModel, SoftmaxRegression, ingest_external_scores, score, train
from .synthgen import CohortSpec, SyntheticSlide, generate_cohort, write_cohort
from .viz import RenderMode, RenderSpec, render, trace_boundary

__version__ = "0.1.0"
