"""Tissue detection, Macenko stain normalization and training augmentation.

Optical density uses ``OD = -log10((I + 1) / 256)`` so that white (255)
maps to exactly zero and ``I = 0`` stays finite. Rendering inverts it as
``I = 256 * 10**(-OD) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_patch, check_patches, check_rgb_sample
from .exceptions import ConfigError, DegenerateStains, InsufficientTissue, ValidationError

OD_THRESHOLD = 0.15
ANGLE_PERCENTILE = 1.0
MIN_STAIN_PIXELS = 1000
# second singular value below this fraction of the first: one stain only
RANK_TOLERANCE = 1e-2


@dataclass(frozen=True)
class TissueThresholds:
    saturation: float = 0.08
    value: float = 0.95
    fraction: float = 0.25

    def __post_init__(self):
        for name in ("saturation", "value", "fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"tissue {name} threshold must be in [0, 1], got {v}")


def saturation_value(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HSV saturation and value in [0, 1] for an ``(..., 3)`` uint8 array."""
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    return sat, mx / 255.0


def tissue_mask(rgb: np.ndarray, thresholds: TissueThresholds = TissueThresholds()) -> np.ndarray:
    sat, val = saturation_value(rgb)
    return (sat > thresholds.saturation) & (val < thresholds.value)


def detect_tissue(patch: np.ndarray, thresholds: TissueThresholds = TissueThresholds()) -> bool:
    patch = check_patch(patch, square=False)
    return bool(tissue_mask(patch, thresholds).mean() > thresholds.fraction)


# -- stain model ---------------------------------------------------------------

def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    return -np.log10((rgb.astype(np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, rounded and clamped to uint8."""
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _unit_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


@dataclass(frozen=True, eq=False)
class StainProfile:
    """Two stain directions in OD space (columns: H, E) plus their 99th-percentile concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.array(self.stain_matrix, dtype=np.float64)
        c = np.array(self.max_concentrations, dtype=np.float64).reshape(-1)
        if m.shape != (3, 2):
            raise ValidationError(f"stain_matrix must be 3x2, got {m.shape}")
        if c.shape != (2,) or not np.all(c > 0):
            raise ValidationError(f"max_concentrations must be two positive values, got {c}")
        if np.any(m < 0):
            raise ValidationError("stain_matrix entries must be non-negative")
        m = _unit_columns(m)
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfile":
        """Read ``{stain_matrix: [[h...], [e...]], max_concentrations: [..]}`` (one list per stain)."""
        m = np.asarray(d["stain_matrix"], dtype=float)
        if m.shape == (2, 3):
            m = m.T
        return cls(m, np.asarray(d["max_concentrations"], dtype=float))

    def to_dict(self) -> dict:
        return {
            "stain_matrix": self.stain_matrix.T.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }

    def __eq__(self, other):
        if not isinstance(other, StainProfile):
            return NotImplemented
        # tolerance absorbs re-normalizing already unit columns
        return (np.allclose(self.stain_matrix, other.stain_matrix, rtol=0, atol=1e-12)
                and np.allclose(self.max_concentrations, other.max_concentrations,
                                rtol=0, atol=1e-12))

    __hash__ = None

    def render(self, concentrations: np.ndarray) -> np.ndarray:
        """RGB uint8 image from an ``(..., 2)`` concentration field."""
        od = concentrations @ self.stain_matrix.T
        return od_to_rgb(od)


DEFAULT_REFERENCE = StainProfile(
    np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]]),
    np.array([1.9, 1.0]),
)


def _check_separable(m: np.ndarray) -> None:
    cos = float(np.clip(m[:, 0] @ m[:, 1], -1.0, 1.0))
    if 1.0 - abs(cos) < 1e-6 or np.linalg.matrix_rank(m) < 2:
        raise DegenerateStains("stain vectors are (nearly) parallel")


def concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares stain concentrations for an ``(n, 3)`` OD array -> ``(n, 2)``."""
    _check_separable(stain_matrix)
    return od @ np.linalg.pinv(stain_matrix).T


def estimate_stains(pixels: np.ndarray, od_threshold: float = OD_THRESHOLD,
                    angle_percentile: float = ANGLE_PERCENTILE,
                    min_pixels: int = MIN_STAIN_PIXELS) -> StainProfile:
    """Macenko estimate of the H and E directions from an RGB pixel sample.

    Pixels with any OD channel below ``od_threshold`` are treated as background.
    The stain plane is spanned by the two leading right-singular vectors of the
    remaining OD cloud; the extreme directions (``angle_percentile`` and
    ``100 - angle_percentile``) inside that plane become the stain vectors.
    ``max_concentrations`` is the 99th percentile over the same OD cloud.
    """
    rgb = check_rgb_sample(pixels)
    od = rgb_to_od(rgb)
    od = od[(od >= od_threshold).all(axis=1)]
    if len(od) < min_pixels:
        raise InsufficientTissue(
            f"{len(od)} pixels above OD {od_threshold}; need at least {min_pixels}")

    _, sv, vt = np.linalg.svd(od, full_matrices=False)
    if sv[1] <= RANK_TOLERANCE * sv[0]:
        raise DegenerateStains("OD cloud is rank one; cannot separate two stains")
    plane = vt[:2].T
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1

    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [angle_percentile, 100.0 - angle_percentile])
    vecs = []
    for angle in (lo, hi):
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        n = np.linalg.norm(v)
        if n == 0:
            raise DegenerateStains("stain direction vanished after sign fixing")
        vecs.append(v / n)
    # hematoxylin absorbs more in the blue channel
    if vecs[0][2] < vecs[1][2]:
        vecs.reverse()
    m = np.column_stack(vecs)
    _check_separable(m)

    c = concentrations(od, m)
    max_c = np.percentile(c, 99, axis=0)
    if not np.all(max_c > 0):
        raise InsufficientTissue("non-positive 99th percentile concentration")
    return StainProfile(m, max_c)


def normalize_patch(patch: np.ndarray, source: StainProfile,
                    reference: StainProfile = DEFAULT_REFERENCE) -> np.ndarray:
    """Re-render ``patch`` from ``source`` stains into ``reference`` stains.

    Stain concentrations are rescaled to the reference maxima and re-rendered
    through the reference directions. The part of each pixel's OD that lies
    off the source stain plane (noise, quantization, unmodelled color) is
    carried over unchanged, so a profile mapped onto itself is the identity.
    """
    patch = np.asarray(patch)
    if patch.dtype != np.uint8 or patch.shape[-1] != 3:
        raise ValidationError(f"expected uint8 (..., 3) RGB, got {patch.dtype} {patch.shape}")
    _check_separable(source.stain_matrix)
    _check_separable(reference.stain_matrix)
    shape = patch.shape
    od = rgb_to_od(patch.reshape(-1, 3))
    c = concentrations(od, source.stain_matrix)
    residual = od - c @ source.stain_matrix.T
    c *= reference.max_concentrations / source.max_concentrations
    return od_to_rgb(c @ reference.stain_matrix.T + residual).reshape(shape)


class MacenkoNormalizer(TransformerMixin, BaseEstimator):
    """Fit a stain profile on a slide sample, then map patches onto ``reference``.

    Parameters
    ----------
    reference : StainProfile or dict, optional
        Target stains; defaults to :data:`DEFAULT_REFERENCE`.
    """

    def __init__(self, reference=None, od_threshold=OD_THRESHOLD,
                 angle_percentile=ANGLE_PERCENTILE, min_pixels=MIN_STAIN_PIXELS):
        self.reference = reference
        self.od_threshold = od_threshold
        self.angle_percentile = angle_percentile
        self.min_pixels = min_pixels

    def _reference(self) -> StainProfile:
        ref = self.reference
        if ref is None:
            return DEFAULT_REFERENCE
        return ref if isinstance(ref, StainProfile) else StainProfile.from_dict(ref)

    def fit(self, X, y=None):
        self.stain_profile_ = estimate_stains(
            X, od_threshold=self.od_threshold, angle_percentile=self.angle_percentile,
            min_pixels=self.min_pixels)
        self.reference_profile_ = self._reference()
        return self

    def transform(self, X):
        check_is_fitted(self, "stain_profile_")
        return normalize_patch(np.asarray(X), self.stain_profile_, self.reference_profile_)


# -- augmentation --------------------------------------------------------------

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_size: int = 224
    hflip_probability: float = 0.5
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD
    rng_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.crop_size <= 256:
            raise ConfigError(f"crop_size must be in [1, 256], got {self.crop_size}")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise ConfigError("hflip_probability must be in [0, 1]")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std need three entries")
        if min(self.channel_std) <= 0:
            raise ConfigError("channel_std must be positive")


def crop_flip_params(cfg: AugmentationConfig, draw: int, size: int = 256
                     ) -> tuple[int, int, bool]:
    """Crop offset ``(top, left)`` and flip decision for draw number ``draw``."""
    rng = np.random.default_rng([cfg.rng_seed, draw])
    span = size - cfg.crop_size + 1
    top, left = (int(v) for v in rng.integers(0, span, size=2))
    flip = bool(rng.random() < cfg.hflip_probability)
    return top, left, flip


def random_crop_flip(patch: np.ndarray, cfg: AugmentationConfig, draw: int) -> np.ndarray:
    size = patch.shape[0]
    if cfg.crop_size > size:
        raise ConfigError(f"crop_size {cfg.crop_size} exceeds patch size {size}")
    top, left, flip = crop_flip_params(cfg, draw, size)
    out = patch[top:top + cfg.crop_size, left:left + cfg.crop_size]
    return out[:, ::-1] if flip else out


def standardize(patch: np.ndarray, mean, std) -> np.ndarray:
    x = patch.astype(np.float64) / 255.0
    return (x - np.asarray(mean, dtype=np.float64)) / np.asarray(std, dtype=np.float64)


def augment(patch: np.ndarray, cfg: AugmentationConfig, draw: int) -> np.ndarray:
    """Random crop, random horizontal flip, per-channel standardization.

    Returns a float64 ``(crop_size, crop_size, 3)`` array; identical for the
    same ``cfg.rng_seed`` and ``draw``.
    """
    patch = check_patch(patch)
    return standardize(random_crop_flip(patch, cfg, draw), cfg.channel_mean, cfg.channel_std)


class PatchAugmenter(TransformerMixin, BaseEstimator):
    """Stateless wrapper of :func:`augment` over a patch stack; row ``i`` uses draw ``offset + i``."""

    def __init__(self, crop_size=224, hflip_probability=0.5, channel_mean=IMAGENET_MEAN,
                 channel_std=IMAGENET_STD, rng_seed=0, offset=0):
        self.crop_size = crop_size
        self.hflip_probability = hflip_probability
        self.channel_mean = channel_mean
        self.channel_std = channel_std
        self.rng_seed = rng_seed
        self.offset = offset

    def fit(self, X, y=None):
        self.config_ = AugmentationConfig(
            self.crop_size, self.hflip_probability, tuple(self.channel_mean),
            tuple(self.channel_std), self.rng_seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_patches(X)
        return np.stack([augment(p, self.config_, self.offset + i) for i, p in enumerate(X)])
