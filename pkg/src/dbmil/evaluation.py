"""ROC / FROC construction and the binary-task metrics read from them."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class RocCurve:
    """Operating points in ascending threshold order; positive means score >= threshold."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def sensitivity(self) -> np.ndarray:
        return self.tp / self.n_pos

    @property
    def specificity(self) -> np.ndarray:
        return 1.0 - self.fp / self.n_neg

    def rows(self):
        """(threshold, 1 - specificity, sensitivity) rows."""
        return zip(self.thresholds, self.fp / self.n_neg, self.sensitivity)


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0:
        raise ValueError("labels contain no positive class")
    if n_neg == 0:
        raise ValueError("labels contain no negative class")
    uniq = np.unique(scores)
    # counts of scores >= each unique value, ties crossing together
    pos_sorted = np.sort(scores[labels == 1])
    neg_sorted = np.sort(scores[labels == 0])
    tp = n_pos - np.searchsorted(pos_sorted, uniq, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, uniq, side="left")
    thresholds = np.concatenate([[-np.inf], uniq, [np.inf]])
    tp = np.concatenate([[n_pos], tp, [0]])
    fp = np.concatenate([[n_neg], fp, [0]])
    return RocCurve(thresholds, tp, fp, n_pos, n_neg)


def auroc(curve: RocCurve) -> float:
    x = (curve.fp / curve.n_neg)[::-1]
    y = curve.sensitivity[::-1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def pauc_ratio(curve: RocCurve, band: tuple[float, float] = (0.8, 1.0)) -> float:
    """Area under specificity over a sensitivity band, divided by the band width."""
    lo, hi = band
    sens = curve.sensitivity[::-1]
    spec = curve.specificity[::-1]
    area = 0.0
    for s0, s1, f0, f1 in zip(sens[:-1], sens[1:], spec[:-1], spec[1:]):
        if s1 <= s0:
            continue
        a, b = max(s0, lo), min(s1, hi)
        if b <= a:
            continue
        fa = f0 + (f1 - f0) * (a - s0) / (s1 - s0)
        fb = f0 + (f1 - f0) * (b - s0) / (s1 - s0)
        area += (b - a) * (fa + fb) / 2.0
    return float(area / (hi - lo))


def specificity_at_sensitivity(curve: RocCurve, target: float = 0.85, tol: float = 1e-12) -> float:
    """Specificity where the curve reaches ``target`` sensitivity.

    An operating point sitting exactly at the target wins (best specificity among
    such points); otherwise the crossing segment is interpolated linearly.
    """
    sens, spec = curve.sensitivity, curve.specificity
    exact = np.abs(sens - target) <= tol
    if exact.any():
        return float(spec[exact].max())
    s_desc, f_desc = sens[::-1], spec[::-1]
    for s0, s1, f0, f1 in zip(s_desc[:-1], s_desc[1:], f_desc[:-1], f_desc[1:]):
        if s0 < target < s1:
            return float(f0 + (f1 - f0) * (target - s0) / (s1 - s0))
    raise ValueError(f"sensitivity {target} not reached")  # unreachable for a valid curve


def threshold_at_sensitivity(scores, labels, target: float = 0.85) -> float:
    """Highest score threshold whose sensitivity is at least ``target``."""
    curve = roc_curve(scores, labels)
    ok = curve.sensitivity >= target - 1e-12
    return float(curve.thresholds[ok].max())


# ---------------------------------------------------------------- localization

def iom(r, c) -> float:
    """Intersection over the smaller area for (x, y, w, h) rectangles."""
    rx, ry, rw, rh = r
    cx, cy, cw, ch = c
    if rw <= 0 or rh <= 0 or cw <= 0 or ch <= 0:
        raise ValueError("rectangles must have positive area")
    ix = max(0.0, min(rx + rw, cx + cw) - max(rx, cx))
    iy = max(0.0, min(ry + rh, cy + ch) - max(ry, cy))
    return ix * iy / min(rw * rh, cw * ch)


def iom_matrix(bboxes: np.ndarray, lesions: np.ndarray) -> np.ndarray:
    """(m, L) IoM between every region box and every lesion rectangle."""
    b = np.asarray(bboxes, dtype=np.float64).reshape(-1, 4)
    c = np.asarray(lesions, dtype=np.float64).reshape(-1, 4)
    if (b[:, 2:] <= 0).any() or (c[:, 2:] <= 0).any():
        raise ValueError("rectangles must have positive area")
    ix = np.clip(np.minimum(b[:, None, 0] + b[:, None, 2], c[None, :, 0] + c[None, :, 2])
                 - np.maximum(b[:, None, 0], c[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(b[:, None, 1] + b[:, None, 3], c[None, :, 1] + c[None, :, 3])
                 - np.maximum(b[:, None, 1], c[None, :, 1]), 0, None)
    area_b = b[:, 2] * b[:, 3]
    area_c = c[:, 2] * c[:, 3]
    return ix * iy / np.minimum(area_b[:, None], area_c[None, :])


@dataclass
class LocalizedImage:
    image_id: str
    scores: np.ndarray   # (m,) region scores for one class
    bboxes: np.ndarray   # (m, 4)
    lesions: np.ndarray  # (L, 4) lesions of that class

    def correct(self, iom_threshold: float = 0.5) -> np.ndarray:
        if len(self.lesions) == 0:
            return np.zeros(len(self.scores), dtype=bool)
        return (iom_matrix(self.bboxes, self.lesions) >= iom_threshold).any(axis=1)


@dataclass
class FrocCurve:
    """Points in ascending threshold order: a region is marked when its score >= threshold."""

    thresholds: np.ndarray
    recall: np.ndarray
    fp_per_image: np.ndarray

    def rows(self):
        return zip(self.thresholds, self.fp_per_image, self.recall)

    def recall_at(self, max_fp: float) -> float:
        ok = self.fp_per_image <= max_fp + 1e-12
        return float(self.recall[ok].max()) if ok.any() else 0.0


def froc(images: Sequence[LocalizedImage], iom_threshold: float = 0.5, thresholds=None) -> FrocCurve:
    if not images:
        raise ValueError("FROC needs at least one evaluated image")
    n = len(images)
    hit_at = np.full(n, -np.inf)  # lowest threshold at which the image first counts as found
    wrong = []
    for j, im in enumerate(images):
        ok = im.correct(iom_threshold)
        if ok.any():
            hit_at[j] = im.scores[ok].max()
        wrong.append(im.scores[~ok])
    wrong_scores = np.sort(np.concatenate(wrong)) if wrong else np.zeros(0)
    if thresholds is None:
        pooled = np.concatenate([im.scores for im in images])
        thresholds = np.concatenate([np.unique(pooled), [np.inf]])
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    hits = np.sort(hit_at)
    recall = (n - np.searchsorted(hits, thresholds, side="left")) / n
    fps = (len(wrong_scores) - np.searchsorted(wrong_scores, thresholds, side="left")) / n
    return FrocCurve(thresholds, recall, fps)


# ---------------------------------------------------------------- aggregation and files

def mean_std(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def write_curve_csv(path: str | Path, rows, header=("threshold", "x", "y")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, x, y in rows:
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
