"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The end-to-end criteria (9 to 11) drive the ``melroi`` command line over
synthetic cohorts, so this module takes several minutes.
"""

import hashlib
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binom

from melroi.aggregate import classify_slide, rank_patches, roi_size, select_roi
from melroi.annotations import (AnnotationRegion, AnnotationSet, parse_annotation_xml,
                                patch_membership, serialize_annotation_xml)
from melroi.cli import run_command
from melroi.core import PatchClass, PatchGrid, PatchRecord, ScoreTriplet, SlideLabel
from melroi.evaluate import patch_iou
from melroi.optics import extract_clusters, largest_roi_cluster, optics_order
from melroi.preprocess import estimate_stains, normalize_patch
from melroi.scorer import SoftmaxRegression, loss_and_grad, mean_cross_entropy
from melroi.viz import shoelace, trace_boundary

import oracles
from acceptance_log import record
from helpers import (H_AND_E, is_simple_closed, random_polyomino, random_triplet, render,
                     two_stain_image, unit_columns)


# -- 1 -----------------------------------------------------------------------------

def test_criterion_01_iou_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        cols, rows = (int(v) for v in rng.integers(1, 51, 2))
        cells = [(x, y) for y in range(rows) for x in range(cols)]
        pa, pb = rng.uniform(0, 0.6, 2)
        a = {c for c in cells if rng.random() < pa}
        b = {c for c in cells if rng.random() < pb}
        exact = oracles.iou_sets(a, b, cols, rows)
        if patch_iou(a, b) != float(exact):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    record(1, ok, f"1000 pairs, {mismatches} mismatches, {elapsed:.1f}s (limit 10s)")
    assert ok


# -- 2 -----------------------------------------------------------------------------

def test_criterion_02_topk_protocol():
    rng = np.random.default_rng(102)
    size_errors = 0
    for _ in range(300):
        n = int(rng.integers(0, 400))
        beta = Fraction(int(rng.integers(0, 41)), 40)
        recs = [PatchRecord(i % 20, i // 20, True, scores=random_triplet(rng)) for i in range(n)]
        label = SlideLabel.MELANOMA if rng.random() < 0.5 else SlideLabel.NEVUS
        roi = select_roi(rank_patches(recs, label), float(beta))
        size_errors += len(roi) != oracles.round_half_up(n, beta)
    fixed = roi_size(250, 0.2)

    monotone_failures = 0
    for _ in range(100):
        n = int(rng.integers(1, 300))
        recs = [PatchRecord(i % 17, i // 17, True, scores=random_triplet(rng)) for i in range(n)]
        ranked = rank_patches(recs, SlideLabel.MELANOMA)
        b1, b2 = sorted(rng.uniform(0, 1, 2))
        small = {r.key for r in select_roi(ranked, b1)}
        large = {r.key for r in select_roi(ranked, b2)}
        monotone_failures += not small <= large
    ok = size_errors == 0 and fixed == 50 and monotone_failures == 0
    record(2, ok, f"size errors {size_errors}/300, n=250 beta=0.2 -> {fixed}, "
                  f"monotonicity failures {monotone_failures}/100")
    assert ok


# -- 3 -----------------------------------------------------------------------------

def _patch_for(cls, rng):
    """A random score triplet whose argmax is ``cls`` (0 mel, 1 nev, 2 other)."""
    while True:
        t = random_triplet(rng)
        v = t.as_tuple()
        if int(np.argmax(v)) == cls and sorted(v)[-1] > sorted(v)[-2]:
            return t


def test_criterion_03_majority_vote():
    rng = np.random.default_rng(103)
    failures = 0
    ties_checked = 0
    for i in range(500):
        n_mel, n_nev, n_oth = (int(v) for v in rng.integers(0, 25, 3))
        if i % 4 == 0:
            n_nev = n_mel  # forced tie
        if n_mel + n_nev + n_oth == 0:
            n_oth = 1
        classes = [0] * n_mel + [1] * n_nev + [2] * n_oth
        triplets = [_patch_for(c, rng) for c in classes]
        recs = [PatchRecord(j % 10, j // 10, True, scores=t) for j, t in enumerate(triplets)]
        label, votes = classify_slide(recs)

        want_tie = n_mel == n_nev
        want = SlideLabel.NEVUS if n_nev > n_mel else SlideLabel.MELANOMA
        good = (label is want and votes.tie_flag == want_tie
                and (votes.n_mel, votes.n_nev, votes.n_other) == (n_mel, n_nev, n_oth))
        ties_checked += want_tie

        perm = [recs[j] for j in rng.permutation(len(recs))]
        good &= classify_slide(perm) == (label, votes)

        # move mass into or out of Other without changing any argmax
        nudged = []
        for r in recs:
            m, v, o = r.scores.as_tuple()
            top = max(m, v)
            new_o = rng.uniform(0, top * 0.999) if int(np.argmax((m, v, o))) != 2 else o
            total = m + v + new_o
            nudged.append(PatchRecord(r.grid_x, r.grid_y, True,
                                      scores=ScoreTriplet(m / total, v / total, new_o / total)))
        good &= classify_slide(nudged)[0] is label
        failures += not good
    ok = failures == 0 and ties_checked >= 100
    record(3, ok, f"500 vote tables ({ties_checked} ties), {failures} failures")
    assert ok


# -- 4 -----------------------------------------------------------------------------

def _mean_l2(a, b):
    return float(np.sqrt(((a.astype(float) - b.astype(float)) ** 2).sum(axis=-1)).mean())


def test_criterion_04_stain_normalization():
    start = time.perf_counter()
    rng = np.random.default_rng(104)
    identity_max = 0
    recovery_max = 0.0
    for m in H_AND_E:
        img, _ = two_stain_image(m, rng)
        p = estimate_stains(img)
        recovery_max = max(recovery_max, float(np.abs(p.stain_matrix - unit_columns(m)).max()))
        identity_max = max(identity_max,
                           int(np.abs(normalize_patch(img, p, p).astype(int) - img).max()))

    reductions = []
    for src, dst, scale in ((1, 0, 1.0), (0, 1, 1.0), (1, 0, 1.3), (1, 0, 0.8), (0, 1, 0.8)):
        target, conc = two_stain_image(H_AND_E[dst], rng)
        source = render(H_AND_E[src], conc * scale)
        before = _mean_l2(source, target)
        after = _mean_l2(normalize_patch(source, estimate_stains(source), estimate_stains(target)),
                         target)
        reductions.append(1 - after / before)
    elapsed = time.perf_counter() - start
    ok = identity_max <= 2 and min(reductions) >= 0.5 and recovery_max <= 0.02 and elapsed < 60
    record(4, ok, f"identity max change {identity_max}, paired-distance reduction "
                  f">= {min(reductions):.2f}, recovery error {recovery_max:.4f}, {elapsed:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------------

def test_criterion_05_classifier():
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(5, 30)), int(rng.integers(2, 12))
        X = rng.normal(size=(n, d))
        y = rng.integers(0, 3, n)
        W = rng.normal(scale=0.7, size=(3, d + 1))
        _, g = loss_and_grad(W, X, y)
        num = oracles.numeric_gradient(lambda w: mean_cross_entropy(w, X, y), W.copy())
        worst = max(worst, float(np.abs(g - num).max() / max(np.abs(num).max(), 1e-12)))
    X = rng.normal(size=(200, 40))
    y = rng.integers(0, 3, 200)
    log3_err = abs(mean_cross_entropy(np.zeros((3, 41)), X, y) - math.log(3))

    centers = rng.normal(scale=6.0, size=(3, 40))
    y = np.repeat(np.arange(3), 200)
    X = centers[y] + rng.normal(size=(600, 40))
    est = SoftmaxRegression(epochs=100, seed=5).fit(X, y)
    acc = float((est.predict(X) == y).mean())
    epochs = len(est.loss_curve_) - 1
    ok = worst < 1e-4 and log3_err <= 1e-9 and acc >= 0.99 and epochs <= 100
    record(5, ok, f"gradient rel error {worst:.2e}, |CE0 - ln3| {log3_err:.1e}, "
                  f"training accuracy {acc:.3f} after {epochs} epochs")
    assert ok


# -- 6 -----------------------------------------------------------------------------

def _layout(rng, n):
    side = int(rng.integers(5, 30))
    n = min(n, side * side)
    if rng.random() < 0.5:
        cells = rng.choice(side * side, size=n, replace=False)
        return [(float(c % side), float(c // side)) for c in cells]
    pts = {(round(float(x), 3), round(float(y), 3)) for x, y in rng.uniform(0, side, (n, 2))}
    return sorted(pts)


def _partition_agrees(pts, got, is_core, want, t):
    core = [i for i, c in enumerate(is_core) if c]
    pairs = {}
    for i in core:
        if pairs.setdefault(got[i], want[i]) != want[i]:
            return False
    if len(set(pairs.values())) != len(pairs):
        return False
    for i, c in enumerate(is_core):
        if c:
            continue
        claim = {got[j] for j in core if math.dist(pts[i], pts[j]) <= t}
        if not claim:
            if got[i] != -1 or want[i] != -1:
                return False
        elif got[i] not in claim or want[i] == -1:
            return False
    return True


def test_criterion_06_optics():
    rng = np.random.default_rng(106)
    order_fail = cluster_fail = exact = 0
    for i in range(50):
        min_pts = int(rng.integers(2, 6))
        pts = _layout(rng, int(rng.integers(min_pts, 201)))
        min_pts = min(min_pts, len(pts))
        eps = float(rng.choice([1.5, 2.0, 3.0]))
        t = eps if i % 2 == 0 else eps * float(rng.uniform(0.5, 1.0))
        plot = optics_order(pts, min_pts, eps)
        order, reach, core = oracles.optics_bruteforce(pts, min_pts, eps)
        if (plot.ordering.tolist() != order or not np.array_equal(plot.reachability, reach)
                or not np.array_equal(plot.core_distances, core)):
            order_fail += 1
        got = extract_clusters(plot, t, pts).tolist()
        is_core, want = oracles.dbscan_bruteforce(pts, min_pts, t)
        cluster_fail += not _partition_agrees(pts, got, is_core, want, t)
        exact += len({(g, w) for g, w in zip(got, want)}) == len(set(want))
    flood_fail = 0
    for _ in range(50):
        side = int(rng.integers(3, 25))
        n = int(rng.integers(1, min(200, side * side) + 1))
        cells = rng.choice(side * side, size=n, replace=False)
        keys = [(int(c % side), int(c // side)) for c in cells]
        flood_fail += largest_roi_cluster(keys) != oracles.largest_component(keys)
    ok = order_fail == cluster_fail == flood_fail == 0
    record(6, ok, f"50 layouts: ordering mismatches {order_fail}, DBSCAN partition mismatches "
                  f"{cluster_fail} ({exact} identical including border labels), "
                  f"largest-cluster mismatches {flood_fail}/50")
    assert ok


# -- 7 -----------------------------------------------------------------------------

def test_criterion_07_boundary():
    rng = np.random.default_rng(107)
    grid = PatchGrid("s", 20, 20)
    area_fail = simple_fail = 0
    for _ in range(100):
        cells = random_polyomino(rng, 20, 20, int(rng.integers(1, 80)))
        poly = trace_boundary(cells, grid)
        area_fail += not (shoelace(poly) == oracles.shoelace(poly) == 256 ** 2 * len(cells))
        simple_fail += not is_simple_closed(poly)
    ok = area_fail == simple_fail == 0
    record(7, ok, f"100 masks: area mismatches {area_fail}, non-simple contours {simple_fail}")
    assert ok


# -- 8 -----------------------------------------------------------------------------

def _random_set(rng, i):
    regions = []
    for r in range(int(rng.integers(0, 6))):
        n = int(rng.integers(3, 16))
        pts = rng.uniform(0, 5000, (n, 2))
        if rng.random() < 0.5:
            pts = np.round(pts)
        cls = [None, *PatchClass][int(rng.integers(4))]
        regions.append(AnnotationRegion(str(r + 1), tuple(map(tuple, pts.tolist())), cls))
    return AnnotationSet(f"slide_{i}", tuple(regions))


def _star(rng, cx, cy):
    n = int(rng.integers(3, 20))
    theta = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(100, 1500, n)
    return [(cx + a * math.cos(t), cy + a * math.sin(t)) for a, t in zip(r, theta)]


def test_criterion_08_annotation_xml():
    rng = np.random.default_rng(108)
    trip_fail = 0
    for i in range(200):
        aset = _random_set(rng, i)
        trip_fail += parse_annotation_xml(serialize_annotation_xml(aset)) != aset
    member_fail = 0
    grid = PatchGrid("s", 12, 12)
    for _ in range(100):
        star = _star(rng, *rng.uniform(500, 2500, 2))
        aset = AnnotationSet("s", (AnnotationRegion("1", tuple(star)),))
        got = patch_membership(grid, aset)
        want = oracles.cells_inside(star + [star[0]], 12, 12, 256)
        member_fail += {(x, y) for y, x in zip(*np.nonzero(got))} != want
    ok = trip_fail == member_fail == 0
    record(8, ok, f"round-trip failures {trip_fail}/200, membership mismatches {member_fail}/100")
    assert ok


# -- 9 to 11: command-line runs over synthetic cohorts --------------------------------

END_TO_END = ("synth", "extract", "train", "score", "classify", "evaluate")


def run_stages(config: Path, stages, *extra) -> float:
    start = time.perf_counter()
    for stage in stages:
        code = run_command([stage, "--config", str(config), *extra])
        assert code == 0, f"melroi {stage} exited with {code}"
    return time.perf_counter() - start


def cohort_config(folder: Path, separability: float, **synth) -> Path:
    spec = {"n_slides": 60, "class_separability": separability,
            "annotation_coverage": 0.7, "test_annotation_coverage": 1.0}
    spec.update(synth)
    cfg = {"seed": 11, "output": "out", "cohort": {"synth": spec},
           "evaluation": {"split_fraction": 0.8, "fractions": [0.2, 0.4, 0.6, 0.8], "repeats": 3}}
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture(scope="session")
def separable_run(tmp_path_factory):
    config = cohort_config(tmp_path_factory.mktemp("separable"), 60.0)
    elapsed = run_stages(config, END_TO_END)
    return config, elapsed


def test_criterion_09_end_to_end(separable_run, tmp_path_factory):
    config, elapsed = separable_run
    report = json.loads((config.parent / "out" / "eval" / "report.json").read_text())
    acc, iou = report["slide_accuracy"], report["mean_iou"]

    chance_cfg = cohort_config(tmp_path_factory.mktemp("chance"), 0.0)
    chance_time = run_stages(chance_cfg, END_TO_END)
    chance = json.loads((chance_cfg.parent / "out" / "eval" / "report.json").read_text())
    n_test = len(chance["per_slide"])
    lo, hi = binom.ppf(0.025, n_test, 0.5) / n_test, binom.ppf(0.975, n_test, 0.5) / n_test
    chance_acc = chance["slide_accuracy"]

    ok = (acc >= 0.95 and iou >= 0.70 and elapsed < 600 and chance_time < 600
          and lo <= chance_acc <= hi)
    record(9, ok, f"separable: slide accuracy {acc:.3f}, mean IoU {iou:.3f} on "
                  f"{len(report['per_slide'])} test slides, {elapsed:.0f}s; no signal: slide "
                  f"accuracy {chance_acc:.3f} in chance band [{lo:.3f}, {hi:.3f}], {chance_time:.0f}s")
    assert ok


def test_criterion_10_sweep(separable_run):
    config, _ = separable_run
    elapsed = run_stages(config, ("sweep",))
    doc = json.loads((config.parent / "out" / "sweep" / "summary.json").read_text())
    rows = {float(r["fraction"]): r for r in doc["rows"]}
    shape_ok = (sorted(rows) == [0.2, 0.4, 0.6, 0.8] and doc["n_repeats"] == 3
                and all({"patch_accuracy", "slide_accuracy", "mean_iou"} <= set(r) for r in rows.values()))
    lo, hi = rows[0.2]["slide_accuracy"]["mean"], rows[0.8]["slide_accuracy"]["mean"]
    ok = shape_ok and hi >= lo and elapsed < 1800
    record(10, ok, f"4 fractions x 3 repeats, slide accuracy {lo:.3f} at 0.2 vs {hi:.3f} at 0.8, "
                   f"{elapsed:.0f}s (limit 1800s)")
    assert ok


ALL_STAGES = ("synth", "extract", "train", "score", "classify", "evaluate", "sweep", "visualize")


def digests(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(tmp_path):
    small = {"n_slides": 10, "class_balance": 0.5, "slide_size": [1536, 1536]}
    runs = []
    for name, workers in (("a", 2), ("b", 2), ("c", 1)):
        config = cohort_config(tmp_path / name, 40.0, **small)
        run_stages(config, ALL_STAGES, "--workers", str(workers))
        runs.append(digests(config.parent / "out"))
    kinds = sorted({Path(k).suffix for k in runs[0]})
    same = runs[0] == runs[1] == runs[2]
    ok = same and {".json", ".csv", ".png"} <= set(kinds)
    diff = sorted(k for k in runs[0] if runs[0].get(k) != runs[1].get(k) or runs[0].get(k) != runs[2].get(k))
    record(11, ok, f"{len(runs[0])} artifacts ({', '.join(kinds)}) identical across 2 runs with "
                   f"2 workers and 1 run with 1 worker: {same}" + (f"; differing: {diff[:5]}" if diff else ""))
    assert ok
