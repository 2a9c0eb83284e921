"""Input checks shared by the estimators."""

import numpy as np

from .exceptions import ValidationError


def check_patch(patch, square=True) -> np.ndarray:
    """Return ``patch`` as an ``(h, w, 3)`` uint8 array or raise."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValidationError(f"expected an (h, w, 3) RGB patch, got shape {patch.shape}")
    if patch.dtype != np.uint8:
        raise ValidationError(f"expected uint8 pixels, got {patch.dtype}")
    if square and patch.shape[0] != patch.shape[1]:
        raise ValidationError(f"expected a square patch, got {patch.shape[:2]}")
    return patch


def check_patches(X) -> np.ndarray:
    """Return ``X`` as an ``(n, h, w, 3)`` uint8 stack or raise."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValidationError(f"expected an (n, h, w, 3) patch stack, got shape {X.shape}")
    if X.dtype != np.uint8:
        raise ValidationError(f"expected uint8 pixels, got {X.dtype}")
    return X


def check_rgb_sample(pixels) -> np.ndarray:
    """Flatten any ``(..., 3)`` RGB array to ``(n, 3)`` float64 in [0, 255]."""
    px = np.asarray(pixels)
    if px.shape[-1] != 3:
        raise ValidationError(f"expected RGB samples with a trailing axis of 3, got {px.shape}")
    px = px.reshape(-1, 3).astype(np.float64)
    if px.size and (px.min() < 0 or px.max() > 255 or not np.isfinite(px).all()):
        raise ValidationError("RGB samples must lie in [0, 255]")
    return px
