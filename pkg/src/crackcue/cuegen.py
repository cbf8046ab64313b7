"""Coarse background, crack cues and the cue-guided segmentation input."""
from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError
from .imagecore import as_image, check_same_hw


def block_max_upsample(x: np.ndarray, k: int) -> np.ndarray:
    """Per-channel k x k block max anchored at (0, 0), broadcast back over each block.

    Works on (H, W) or (H, W, C) arrays; partial edge blocks use their
    truncated extent.
    """
    if k < 2:
        raise ParameterError(f"pooling kernel must be >= 2, got {k}")
    arr = np.asarray(x)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    hb, wb = -(-h // k), -(-w // k)
    padded = np.full((hb * k, wb * k, c), -np.inf)
    padded[:h, :w] = arr
    pooled = padded.reshape(hb, k, wb, k, c).max(axis=(1, 3))
    up = np.repeat(np.repeat(pooled, k, axis=0), k, axis=1)[:h, :w]
    return up[:, :, 0] if squeeze else up


def coarse_background(image: np.ndarray, k: int = 8) -> np.ndarray:
    """Max-pool with stride k followed by nearest upsampling, cropped to H x W."""
    return block_max_upsample(as_image(image), k)


def coarse_cue(image: np.ndarray, k: int = 8) -> np.ndarray:
    img = as_image(image)
    bg = block_max_upsample(img, k)
    return np.abs(img - bg).mean(axis=2)


def fine_cue(image: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Channel-mean absolute difference between an image and its reconstructed background."""
    img = as_image(image)
    bg = as_image(background)
    if img.shape != bg.shape:
        raise ShapeError(f"image {img.shape} and background {bg.shape} differ")
    return np.abs(img - bg).mean(axis=2)


def cue_guided_input(image: np.ndarray, cue: np.ndarray) -> np.ndarray:
    """Stack (I1, I2, I3, Q) into an (H, W, 4) array."""
    img = as_image(image)
    q = np.asarray(cue, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeError(f"cue must be 2-D, got shape {q.shape}")
    check_same_hw(img, q, "image and cue")
    return np.concatenate([img, q[:, :, None]], axis=2)
