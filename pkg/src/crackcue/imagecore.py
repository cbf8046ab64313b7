"""Image/mask representation, raster I/O and morphology.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in [0, 1].
Masks are ``uint8`` arrays of shape ``(H, W)`` holding exactly 0 or 1.
Scalar fields (cue maps, probability maps, logits) are 2-D float arrays.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, ParameterError, RangeError, ShapeError

RAWF32_MAGIC = "CCF1"


def as_image(data) -> np.ndarray:
    """Validate and normalise an array into the (H, W, 3) float image layout."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RangeError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise RangeError("image values must lie in [0, 1]")
    return arr


def as_mask(data) -> np.ndarray:
    """Binarise with the nonzero-is-crack convention."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ShapeError(f"expected (H, W) mask, got shape {arr.shape}")
    return (arr != 0).astype(np.uint8)


def check_same_hw(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"{what} differ in size: {a.shape[:2]} vs {b.shape[:2]}")


def _read_raster(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc

    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode in ("RGB", "RGBA"):
        return arr[:, :, :3].astype(np.float64) / 255.0
    if mode == "LA":
        return arr[:, :, 0].astype(np.float64) / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        if arr.min() < 0 or arr.max() > 65535:
            raise FormatError(f"{path}: integer raster outside 16-bit range")
        return arr.astype(np.float64) / 65535.0
    raise FormatError(f"{path}: unsupported raster mode {mode!r}")


def load_image(path) -> np.ndarray:
    """Load an 8/16-bit gray or 8-bit RGB PNG as an (H, W, 3) image in [0, 1]."""
    return as_image(_read_raster(path))


def load_mask(path) -> np.ndarray:
    arr = _read_raster(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return as_mask(arr > 0)


def load_gray(path) -> np.ndarray:
    """Load a single-channel field (e.g. a saved probability map) in [0, 1]."""
    arr = _read_raster(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def save_image(image: np.ndarray, path) -> None:
    """Write an image as 8-bit PNG; gray when all three channels agree."""
    img = as_image(image)
    q = np.round(img * 255.0).astype(np.uint8)
    if np.array_equal(q[:, :, 0], q[:, :, 1]) and np.array_equal(q[:, :, 0], q[:, :, 2]):
        Image.fromarray(q[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(q, mode="RGB").save(path)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(as_mask(mask) * np.uint8(255), mode="L").save(path)


def save_field(field, path, mode: str = "png16") -> None:
    """Write a 2-D field as 16-bit PNG (values in [0, 1]) or rawf32."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D field, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RangeError("field contains non-finite values")
    if mode == "png16":
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise RangeError("png16 fields must lie in [0, 1]")
        q = np.round(arr * 65535.0).astype(np.uint16)
        Image.fromarray(q).save(path)
    elif mode == "rawf32":
        h, w = arr.shape
        with open(path, "wb") as fh:
            fh.write(f"{RAWF32_MAGIC} {h} {w}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    else:
        raise ParameterError(f"unknown field mode {mode!r}")


def load_field(path) -> np.ndarray:
    """Read a rawf32 field as float32 (H, W)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) != 3 or header[0] != RAWF32_MAGIC:
        raise FormatError(f"{path}: not a {RAWF32_MAGIC} field")
    h, w = int(header[1]), int(header[2])
    if len(payload) != 4 * h * w:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, expected {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def square_side(d: int) -> int:
    return 2 * (int(d) // 2) + 1


def dilate_mask(y: np.ndarray, d: int) -> np.ndarray:
    """Dilate with a square of side 2*floor(d/2)+1 (d=4 -> 5x5)."""
    if d < 1:
        raise ParameterError(f"dilation width must be >= 1, got {d}")
    mask = as_mask(y)
    side = square_side(d)
    if side == 1:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=side, mode="constant", cval=0).astype(np.uint8)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W) (half-pixel centres, no antialiasing)."""
    import torch
    import torch.nn.functional as F

    img = as_image(image)
    if img.shape[:2] == tuple(size):
        return img.copy()
    t = torch.from_numpy(img).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize so the mask stays binary."""
    m = as_mask(mask)
    h, w = m.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return m[np.ix_(rows, cols)]
