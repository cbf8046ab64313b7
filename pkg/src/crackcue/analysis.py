"""Pixel-intensity histograms per domain and a 1-Wasserstein domain gap."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .imagecore import as_mask

N_BINS = 64


@dataclass
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "mass"])
            for lo, hi, m in zip(self.edges[:-1], self.edges[1:], self.mass):
                w.writerow([lo, hi, m])


def _intensity(field) -> np.ndarray:
    a = np.asarray(field, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D field or (H, W, C) image, got shape {a.shape}")
    return a


def intensity_histogram(fields, roi=None, bins: int = N_BINS) -> Histogram:
    """Pooled, normalised histogram over [0, 1] of all pixels (channel mean for images).

    ``roi`` is either one mask applied to every field or a list of per-field
    masks (``None`` entries keep every pixel). Values outside [0, 1] are
    clipped into the end bins.
    """
    fields = list(fields)
    if not fields:
        raise ParameterError("need at least one field")
    rois = roi if isinstance(roi, (list, tuple)) else [roi] * len(fields)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins)
    for f, r in zip(fields, rois):
        v = _intensity(f)
        if r is not None:
            v = v[as_mask(r).astype(bool)]
        counts += np.histogram(np.clip(v, 0.0, 1.0), bins=edges)[0]
    total = counts.sum()
    if total == 0:
        raise ParameterError("no pixels selected")
    return Histogram(edges, counts / total)


def domain_gap(h1: Histogram, h2: Histogram) -> float:
    """1-Wasserstein distance between binned distributions, in intensity units."""
    if h1.edges.shape != h2.edges.shape or not np.allclose(h1.edges, h2.edges):
        raise ShapeError("histograms use different binnings")
    widths = np.diff(h1.edges)
    return float(np.sum(np.abs(np.cumsum(h1.mass) - np.cumsum(h2.mass))[:-1] * widths[:-1]))


def gap_report(images_a, images_b, ckpt, batch_size: int = 8) -> dict:
    """Raw-intensity and cue-intensity gaps between two corpora of (H, W, 3) images.

    Every pixel is included (no ROI, crack pixels kept). The checkpoint's
    cue path is used; a cue-free checkpoint yields ``cue_gap = None``.
    """
    from .trainer import predict

    images_a, images_b = list(images_a), list(images_b)
    raw_a = intensity_histogram(images_a)
    raw_b = intensity_histogram(images_b)
    cues_a, _ = predict(images_a, ckpt, batch_size)
    cues_b, _ = predict(images_b, ckpt, batch_size)
    report = {
        "raw_gap": domain_gap(raw_a, raw_b),
        "cue_gap": None,
        "pixels": "all",
        "bins": len(raw_a.mass),
        "histograms": {"raw_a": raw_a, "raw_b": raw_b},
    }
    if cues_a[0] is not None:
        cue_a = intensity_histogram(cues_a)
        cue_b = intensity_histogram(cues_b)
        report["cue_gap"] = domain_gap(cue_a, cue_b)
        report["histograms"].update(cue_a=cue_a, cue_b=cue_b)
    return report
