"""Tolerance-matched precision/recall, PR curves and ODS / OIS / AP.

A predicted pixel is a true positive when some ground-truth pixel lies within
Chebyshev distance ``tol`` of it; symmetrically for recall. This is the same
as intersecting each mask with the other one dilated by a (2*tol+1) square.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError
from .imagecore import as_mask

DEFAULT_THRESHOLDS = np.arange(1, 100) / 100.0


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    tp_pred: int
    fp: int
    tp_gt: int
    fn: int

    @property
    def precision(self) -> float:
        d = self.tp_pred + self.fp
        return 1.0 if d == 0 else self.tp_pred / d

    @property
    def recall(self) -> float:
        d = self.tp_gt + self.fn
        return 1.0 if d == 0 else self.tp_gt / d

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _near(mask: np.ndarray, tol: int) -> np.ndarray:
    if tol == 0:
        return mask.astype(bool)
    return ndimage.maximum_filter(mask, size=2 * tol + 1, mode="constant", cval=0).astype(bool)


def tolerant_counts(pred, gt, tol: int = 3, roi=None) -> tuple[int, int, int, int]:
    """(TP_pred, FP, TP_gt, FN) with Chebyshev tolerance; pixels outside ``roi`` are dropped."""
    if tol < 0:
        raise ParameterError("tolerance must be >= 0")
    p = as_mask(pred)
    g = as_mask(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    if roi is not None:
        r = as_mask(roi)
        if r.shape != p.shape:
            raise ShapeError(f"roi {r.shape} does not match {p.shape}")
        p = p & r
        g = g & r
    pb, gb = p.astype(bool), g.astype(bool)
    tp_pred = int(np.count_nonzero(pb & _near(g, tol)))
    tp_gt = int(np.count_nonzero(gb & _near(p, tol)))
    return tp_pred, int(pb.sum()) - tp_pred, tp_gt, int(gb.sum()) - tp_gt


def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=np.float64)
    if t.size == 0:
        raise ParameterError("threshold list is empty")
    if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > 1:
        raise ParameterError("thresholds must be strictly increasing within [0, 1]")
    return t


def pr_curve(prob, gt, thresholds=None, tol: int = 3, roi=None) -> list[PRPoint]:
    """Tolerant counts of ``prob >= t`` against ``gt`` for every threshold."""
    t = _check_thresholds(thresholds)
    prob = np.asarray(prob, dtype=np.float64)
    g = as_mask(gt)
    if prob.shape != g.shape:
        raise ShapeError(f"probability map {prob.shape} and ground truth {g.shape} differ")
    if roi is not None:
        r = as_mask(roi)
        if r.shape != g.shape:
            raise ShapeError(f"roi {r.shape} does not match {g.shape}")
        g = g & r
        prob = np.where(r.astype(bool), prob, -np.inf)
    near_gt = _near(g, tol)
    gb = g.astype(bool)
    n_gt = int(gb.sum())
    out = []
    for thr in t:
        pb = prob >= thr
        tp_pred = int(np.count_nonzero(pb & near_gt))
        tp_gt = int(np.count_nonzero(gb & _near(pb.astype(np.uint8), tol)))
        out.append(PRPoint(float(thr), tp_pred, int(pb.sum()) - tp_pred, tp_gt, n_gt - tp_gt))
    return out


def pooled_curve(curves: list[list[PRPoint]]) -> list[PRPoint]:
    """Sum counts over images at each threshold."""
    if not curves:
        raise ParameterError("need at least one image")
    n = len(curves[0])
    if any(len(c) != n for c in curves):
        raise ShapeError("curves use different threshold grids")
    pooled = []
    for j in range(n):
        pts = [c[j] for c in curves]
        pooled.append(PRPoint(pts[0].threshold, sum(p.tp_pred for p in pts),
                              sum(p.fp for p in pts), sum(p.tp_gt for p in pts),
                              sum(p.fn for p in pts)))
    return pooled


def ods(curves: list[list[PRPoint]]) -> tuple[float, float]:
    """Best pooled F1 over a shared threshold; ties go to the lowest threshold."""
    pooled = pooled_curve(curves)
    f = [p.f1 for p in pooled]
    j = int(np.argmax(f))
    return f[j], pooled[j].threshold


def ois(curves: list[list[PRPoint]]) -> float:
    if not curves:
        raise ParameterError("need at least one image")
    return float(np.mean([max(p.f1 for p in c) for c in curves]))


def ap(points: list[PRPoint]) -> float:
    """Trapezoidal area under precision(recall), points sorted by recall.

    The curve is anchored at recall 0 with the precision of its lowest-recall
    point, so a perfect detector (every point at (1, 1)) scores 1. Nothing is
    extrapolated beyond the highest observed recall. A single point is not a
    curve and scores 0 with a warning.
    """
    if len(points) < 2:
        warnings.warn("average precision of a single PR point is zero", RuntimeWarning)
        return 0.0
    pr = sorted((p.recall, p.precision) for p in points)
    r = np.array([0.0] + [x[0] for x in pr])
    p = np.array([pr[0][1]] + [x[1] for x in pr])
    return float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) / 2.0))


@dataclass
class EvalReport:
    curve: list[PRPoint]
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ods": self.ods,
            "ods_threshold": self.ods_threshold,
            "ois": self.ois,
            "ap": self.ap,
            "curve": [{"t": p.threshold, "p": p.precision, "r": p.recall, "f1": p.f1}
                      for p in self.curve],
            "per_image": self.per_image,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f1"])
            for p in self.curve:
                w.writerow([p.threshold, p.precision, p.recall, p.f1])


def evaluate(probs, gts, rois=None, thresholds=None, tol: int = 3, names=None,
             executor=None) -> EvalReport:
    """Evaluate a list of probability maps against binary ground truth."""
    probs, gts = list(probs), list(gts)
    if len(probs) != len(gts) or not probs:
        raise ParameterError("need equal, nonzero numbers of predictions and ground truths")
    rois = [None] * len(probs) if rois is None else list(rois)
    names = [str(i) for i in range(len(probs))] if names is None else list(names)

    def one(i):
        return pr_curve(probs[i], gts[i], thresholds, tol, rois[i])

    mapper = executor.map if executor is not None else map
    curves = list(mapper(one, range(len(probs))))
    score, thr = ods(curves)
    per_image = []
    for name, c in zip(names, curves):
        j = int(np.argmax([p.f1 for p in c]))
        per_image.append({"name": name, "best_f1": c[j].f1, "best_threshold": c[j].threshold})
    pooled = pooled_curve(curves)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        area = ap(pooled)
    return EvalReport(curve=pooled, ods=score, ods_threshold=thr, ois=ois(curves),
                      ap=area, per_image=per_image)
