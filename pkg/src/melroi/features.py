"""Hand-crafted, flip-invariant patch descriptors for the built-in scorer.

Layout of the 40-dim vector (``FEATURE_NAMES`` lists each entry):

* RGB mean/std/skewness per channel (9), intensities scaled to [0, 1]
* H and E concentration mean/std/skewness (6), using the reference stains
* 8-bin hue histogram (8)
* 8-bin H-concentration histogram over ``[0, h_max]`` (8)
* edge density and tissue fraction (2)
* HSV saturation and value mean/std/skewness (6)
* mean optical density over channels (1)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_patches
from .preprocess import DEFAULT_REFERENCE, StainProfile, TissueThresholds, rgb_to_od, saturation_value

N_FEATURES = 40
HUE_BINS = 8
H_BINS = 8
EDGE_THRESHOLD = 0.1


def _stat_names(prefix, channels):
    return [f"{prefix}_{c}_{s}" for c in channels for s in ("mean", "std", "skew")]


FEATURE_NAMES = (
    _stat_names("rgb", "rgb")
    + _stat_names("stain", ("h", "e"))
    + [f"hue_hist_{i}" for i in range(HUE_BINS)]
    + [f"h_hist_{i}" for i in range(H_BINS)]
    + ["edge_density", "tissue_fraction"]
    + _stat_names("hsv", ("s", "v"))
    + ["od_mean"]
)
assert len(FEATURE_NAMES) == N_FEATURES


def moments(x: np.ndarray) -> tuple[float, float, float]:
    """Mean, population std and skewness; skewness is 0 for constant input."""
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    mean = x.mean()
    d = x - mean
    d2 = d * d
    var = d2.mean()
    std = float(np.sqrt(var))
    skew = float(np.dot(d2, d) / d.size / std ** 3) if std > 1e-12 else 0.0
    if std <= 1e-12:
        std = 0.0
    return float(mean), std, skew


def hue(rgb: np.ndarray) -> np.ndarray:
    """HSV hue in [0, 1); 0 for achromatic pixels."""
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    mx = np.maximum(np.maximum(r, g), b)
    delta = mx - np.minimum(np.minimum(r, g), b)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return h % 1.0


def gray_gradient_magnitude(rgb: np.ndarray) -> np.ndarray:
    """Gradient magnitude of luma in [0, 1]; central differences, one-sided at the border."""
    gray = (rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114) / 255.0
    gy, gx = np.gradient(gray)
    return np.sqrt(gx * gx + gy * gy)


def _histogram(values: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    idx = np.clip(((values - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    return counts / counts.sum()


def extract_features(patch: np.ndarray, stains: StainProfile = DEFAULT_REFERENCE,
                     h_max: float = 2.4,
                     tissue: TissueThresholds = TissueThresholds()) -> np.ndarray:
    """40-dim descriptor of one stain-normalized uint8 RGB patch."""
    rgb = patch.reshape(-1, 3)
    feats: list[float] = []
    for ch in range(3):
        feats.extend(moments(rgb[:, ch] / 255.0))

    od = rgb_to_od(rgb)
    conc = np.linalg.pinv(stains.stain_matrix) @ od.T
    for ch in range(2):
        feats.extend(moments(conc[ch]))

    feats.extend(_histogram(hue(rgb), HUE_BINS, 0.0, 1.0))
    feats.extend(_histogram(conc[0], H_BINS, 0.0, h_max))

    feats.append(float((gray_gradient_magnitude(patch.astype(np.float64)) > EDGE_THRESHOLD).mean()))
    sat, val = saturation_value(rgb)
    feats.append(float(((sat > tissue.saturation) & (val < tissue.value)).mean()))
    feats.extend(moments(sat))
    feats.extend(moments(val))
    feats.append(float(od.mean()))
    return np.asarray(feats, dtype=np.float64)


class PatchFeatureExtractor(TransformerMixin, BaseEstimator):
    """Map an ``(n, h, w, 3)`` uint8 patch stack to ``(n, 40)`` descriptors."""

    def __init__(self, stains=None, h_max=2.4):
        self.stains = stains
        self.h_max = h_max

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_patches(X)
        stains = self.stains if self.stains is not None else DEFAULT_REFERENCE
        if not isinstance(stains, StainProfile):
            stains = StainProfile.from_dict(stains)
        out = np.empty((len(X), N_FEATURES))
        for i, p in enumerate(X):
            out[i] = extract_features(p, stains, self.h_max)
        return out

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FEATURE_NAMES, dtype=object)
