"""Defocus blur and low-contrast corruptions at five severities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .imagecore import as_image

DEFOCUS_RADII = {1: 1, 2: 2, 3: 3, 4: 5, 5: 7}
CONTRAST_FACTORS = {1: 0.75, 2: 0.5, 3: 0.4, 4: 0.3, 5: 0.15}
KINDS = ("defocus", "contrast")


def disk_kernel(radius: int) -> np.ndarray:
    """Normalised disk: offsets with dx^2 + dy^2 <= radius^2 (13 pixels at radius 2)."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx * xx + yy * yy <= r * r).astype(np.float64)
    return k / k.sum()


def defocus_blur(image: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ParameterError("blur radius must be >= 0")
    img = as_image(image)
    if radius == 0:
        return img.copy()
    k = disk_kernel(radius)
    out = np.stack([ndimage.convolve(img[:, :, c], k, mode="reflect") for c in range(3)], axis=2)
    return np.clip(out, 0.0, 1.0)


def contrast_shift(image: np.ndarray, c: float) -> np.ndarray:
    """Contract each channel toward its image mean by factor ``c``, then clamp to [0, 1]."""
    if c <= 0:
        raise ParameterError("contrast factor must be positive")
    img = as_image(image)
    mu = img.mean(axis=(0, 1), keepdims=True)
    return np.clip((img - mu) * c + mu, 0.0, 1.0)


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    severity: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.severity not in DEFOCUS_RADII:
            raise ParameterError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self):
        if self.kind == "defocus":
            return DEFOCUS_RADII[self.severity]
        return CONTRAST_FACTORS[self.severity]

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "defocus":
            return defocus_blur(image, self.parameter)
        return contrast_shift(image, self.parameter)
