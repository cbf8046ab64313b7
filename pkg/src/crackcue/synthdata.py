"""Procedural crack corpora with controllable domain appearance.

Each sample is a textured, unevenly lit gray surface crossed by a few random
walk polylines. Cracks darken the surface by ``crack_darkness`` over their
width (with a soft edge of at most one pixel); the ground truth is the
single-pixel centerline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import line as draw_line

from .errors import ParameterError
from .imagecore import as_mask, dilate_mask, load_image, load_mask, save_image, save_mask

TEXTURES = ("flat", "grain", "blotches")
MANIFEST_FORMAT = "crackcue-corpus/1"


@dataclass(frozen=True)
class DomainSpec:
    name: str = "custom"
    texture: str = "grain"
    brightness: float = 0.7
    texture_amplitude: float = 0.05
    illumination: float = 0.1
    crack_darkness: float = 0.35
    crack_width: tuple[float, float] = (1.5, 3.0)
    cracks: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ParameterError(f"texture must be one of {TEXTURES}")
        if not 0.0 <= self.brightness <= 1.0:
            raise ParameterError("brightness must lie in [0, 1]")
        if not 0.0 < self.crack_darkness <= 1.0:
            raise ParameterError("crack darkness must lie in (0, 1]")
        if self.brightness - self.crack_darkness < 0:
            raise ParameterError("crack darkness exceeds background brightness")
        w_min, w_max = self.crack_width
        if w_min < 1 or w_max < w_min:
            raise ParameterError("crack width range must satisfy 1 <= w_min <= w_max")
        c_min, c_max = self.cracks
        if c_min < 0 or c_max < c_min:
            raise ParameterError("crack count range must satisfy 0 <= min <= max")
        if self.texture_amplitude < 0 or self.illumination < 0:
            raise ParameterError("texture amplitude and illumination must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> DomainSpec:
        doc = dict(doc)
        doc["crack_width"] = tuple(doc["crack_width"])
        doc["cracks"] = tuple(doc["cracks"])
        return cls(**doc)


@dataclass
class SamplePair:
    image: np.ndarray
    gt: np.ndarray

    def __iter__(self):
        return iter((self.image, self.gt))


_PRESETS = {
    "A": DomainSpec(name="A", texture="grain", brightness=0.70, texture_amplitude=0.03,
                    illumination=0.10, crack_darkness=0.40, crack_width=(1.5, 3.0),
                    cracks=(2, 4)),
    "B": DomainSpec(name="B", texture="grain", brightness=0.55, texture_amplitude=0.012,
                    illumination=0.05, crack_darkness=0.10, crack_width=(1.5, 3.0),
                    cracks=(2, 4)),
    "C": DomainSpec(name="C", texture="blotches", brightness=0.55, texture_amplitude=0.12,
                    illumination=0.15, crack_darkness=0.25, crack_width=(1.5, 3.0),
                    cracks=(2, 4)),
    "WIDE": DomainSpec(name="WIDE", texture="grain", brightness=0.70, texture_amplitude=0.03,
                       illumination=0.10, crack_darkness=0.40, crack_width=(20.0, 28.0),
                       cracks=(1, 1)),
}


def domain_presets() -> dict[str, DomainSpec]:
    """A: bright grainy high contrast; B: dark low contrast; C: smooth blotchy; WIDE: w > 8."""
    return dict(_PRESETS)


def get_preset(name: str) -> DomainSpec:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; valid presets: {sorted(_PRESETS)}") from None


def _value_noise(rng, size: int, cell: int, order: int) -> np.ndarray:
    """Random lattice values interpolated to ``size``; roughly in [-1, 1]."""
    n = size // cell + 2
    grid = rng.uniform(-1.0, 1.0, size=(n, n))
    out = ndimage.zoom(grid, cell, order=order, mode="nearest")
    return out[:size, :size]


def _background(spec: DomainSpec, rng, size: int) -> np.ndarray:
    bg = np.full((size, size), spec.brightness)
    if spec.texture == "grain":
        bg += spec.texture_amplitude * _value_noise(rng, size, 2, 1)
    elif spec.texture == "blotches":
        bg += spec.texture_amplitude * _value_noise(rng, size, 16, 3)
    if spec.illumination > 0:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        bg += spec.illumination * (proj - 0.5)
    return bg


def _crack_centerline(rng, size: int) -> np.ndarray:
    """Random-walk polyline rasterised at one-pixel width."""
    mask = np.zeros((size, size), dtype=bool)
    start = rng.uniform(0.2 * size, 0.8 * size, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    step = max(size / 24.0, 2.0)
    for direction in (0.0, np.pi):
        pos = start.copy()
        h = heading + direction
        length = rng.uniform(0.3, 0.6) * size
        travelled = 0.0
        while travelled < length:
            h += rng.normal(0.0, 0.3)
            nxt = pos + step * np.array([np.sin(h), np.cos(h)])
            rr, cc = draw_line(int(round(pos[0])), int(round(pos[1])),
                               int(round(nxt[0])), int(round(nxt[1])))
            keep = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            mask[rr[keep], cc[keep]] = True
            if not keep.all():
                break
            pos = nxt
            travelled += step
    return mask


def render_sample(spec: DomainSpec, rng: np.random.Generator, size: int = 64) -> SamplePair:
    """Render one (image, centerline GT) pair; images are quantised to 8-bit levels."""
    bg = _background(spec, rng, size)
    gt = np.zeros((size, size), dtype=bool)
    darkening = np.zeros((size, size))
    n_cracks = int(rng.integers(spec.cracks[0], spec.cracks[1] + 1))
    for _ in range(n_cracks):
        centre = _crack_centerline(rng, size)
        if not centre.any():
            continue
        width = rng.uniform(*spec.crack_width)
        dist = ndimage.distance_transform_edt(~centre)
        profile = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
        darkening = np.maximum(darkening, spec.crack_darkness * profile)
        gt |= centre
    img = np.clip(bg - darkening, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    return SamplePair(np.repeat(img[:, :, None], 3, axis=2), gt.astype(np.uint8))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def render_corpus(spec: DomainSpec, n: int, seed: int | None = None,
                  size: int = 64) -> list[SamplePair]:
    if n < 1:
        raise ParameterError("corpus size must be >= 1")
    seed = spec.seed if seed is None else seed
    return [render_sample(spec, sample_rng(seed, i), size) for i in range(n)]


def generate_corpus(spec: DomainSpec, n: int, out_dir, seed: int | None = None,
                    size: int = 64) -> dict:
    """Write ``images/NNNN.png``, ``gt/NNNN.png`` and ``manifest.json`` under ``out_dir``."""
    seed = spec.seed if seed is None else seed
    samples = render_corpus(spec, n, seed, size)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    items = []
    for i, s in enumerate(samples):
        img_rel, gt_rel = f"images/{i:04d}.png", f"gt/{i:04d}.png"
        save_image(s.image, out / img_rel)
        save_mask(s.gt, out / gt_rel)
        items.append({"image": img_rel, "gt": gt_rel})
    manifest = {"format": MANIFEST_FORMAT, "spec": asdict(spec), "seed": seed, "size": size,
                "n": n, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def corpus_items(corpus_dir) -> list[dict]:
    """Manifest entries, or stem-matched ``images/`` + ``gt/`` (+ ``roi/``) files."""
    root = Path(corpus_dir)
    manifest = root / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text(encoding="utf-8"))["items"]
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise FileNotFoundError(f"{root}: no manifest.json and no images/*.png")
    items = []
    for p in images:
        item = {"image": f"images/{p.name}", "gt": f"gt/{p.name}"}
        if (root / "roi" / p.name).exists():
            item["roi"] = f"roi/{p.name}"
        items.append(item)
    return items


def load_corpus(corpus_dir, with_roi: bool = False):
    """Load (image, gt) pairs from a corpus directory; with ``with_roi`` also ROI masks."""
    root = Path(corpus_dir)
    pairs, rois = [], []
    for item in corpus_items(root):
        img = load_image(root / item["image"])
        gt = load_mask(root / item["gt"]) if item.get("gt") else None
        pairs.append(SamplePair(img, gt))
        rois.append(load_mask(root / item["roi"]) if item.get("roi") else None)
    return (pairs, rois) if with_roi else pairs


def cue_concentration(cue: np.ndarray, gt: np.ndarray, d: int) -> float:
    """Fraction of total cue mass lying inside ``gt`` dilated with width ``d``."""

    q = np.asarray(cue, dtype=np.float64)
    total = q.sum()
    if total <= 0:
        return 0.0
    return float(q[dilate_mask(as_mask(gt), d).astype(bool)].sum() / total)
